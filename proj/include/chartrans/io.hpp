#pragma once

#include <string>
#include <vector>

namespace chartrans {

// IoError when the file cannot be opened or read.
std::string read_file(const std::string& path);
// Lines without their terminators; a trailing newline does not add an empty
// line and CRLF endings are accepted.
std::vector<std::string> read_lines(const std::string& path);

// Writes to a sibling temporary file, then renames it over `path`, so readers
// never see a partial file.
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace chartrans
