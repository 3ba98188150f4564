#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace chartrans {

// Splits UTF-8 text into code points, each returned as its byte sequence.
// Malformed bytes come back as single-byte strings so the split is lossless.
std::vector<std::string> utf8_chars(std::string_view text);

std::size_t utf8_length(std::string_view text);

std::u32string utf8_to_u32(std::string_view text);
std::string u32_to_utf8(std::u32string_view text);

std::vector<std::string> split_whitespace(std::string_view text);

// Minimal replacement for the Moses tokenizer: whitespace split, ASCII
// punctuation detached into its own token, tokens rejoined by single spaces.
// Case is preserved.
std::string pretokenize(std::string_view text);

// Escapes backslash, newline and tab so a token fits on one line.
std::string escape_token(std::string_view token);
std::string unescape_token(std::string_view line);

// Parses "key=value" lines. Blank lines and lines starting with '#' are
// skipped; whitespace around keys and values is trimmed. Throws DataError on a
// line without '=' or a repeated key, naming `source` and the line number.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text,
                                                                  std::string_view source);

}  // namespace chartrans
