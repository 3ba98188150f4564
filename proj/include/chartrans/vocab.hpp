#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace chartrans {

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;
inline constexpr std::int32_t kEos = 2;
inline constexpr std::int32_t kUnk = 3;
inline constexpr std::size_t kNumSpecials = 4;

inline constexpr std::size_t kDefaultCharVocabSize = 300;

// Bijective token <-> id map. Ids 0..3 are PAD, BOS, EOS, UNK.
class Vocab {
 public:
  Vocab();

  // Appends corpus tokens after the specials, in the given order. Duplicates
  // and tokens spelled like a special are rejected.
  static Vocab from_tokens(std::span<const std::string> tokens);

  std::size_t size() const { return id_to_token_.size(); }
  std::optional<std::int32_t> find(std::string_view token) const;
  // Unknown tokens map to UNK.
  std::int32_t id(std::string_view token) const;
  const std::string& token(std::int32_t id) const;

  // One token per line, id = line number, specials on lines 0..3.
  void save(std::ostream& out) const;
  static Vocab load(std::istream& in);

  bool operator==(const Vocab& other) const { return id_to_token_ == other.id_to_token_; }

 private:
  void append(std::string token);

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::int32_t> token_to_id_;
};

const std::string& special_token_name(std::int32_t id);

// Most frequent code points (space included) up to max_size - 4, plus the
// specials. Frequency ties go to the smaller code point. Throws DataError on an
// empty corpus or max_size < 5.
Vocab build_char_vocab(std::span<const std::string> corpus,
                       std::size_t max_size = kDefaultCharVocabSize);

// Vocabulary over already segmented sentences, most frequent first, ties in
// byte order. max_size == 0 keeps every token.
Vocab build_token_vocab(std::span<const std::vector<std::string>> segmented,
                        std::size_t max_size = 0);

}  // namespace chartrans
