#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace dabench::text {

std::string_view trim(std::string_view s);
std::string to_lower(std::string_view s);
bool starts_with_icase(std::string_view s, std::string_view prefix);
bool iequals(std::string_view a, std::string_view b);
std::vector<std::string> split_lines(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

// Lowercased maximal runs of ASCII alphanumerics; bytes >= 0x80 are treated
// as word characters so non-Latin words survive as tokens.
std::vector<std::string> word_tokens(std::string_view s);

// Replaces invalid UTF-8 sequences with U+FFFD.
std::string sanitize_utf8(std::string_view s);

std::size_t utf8_length(std::string_view s);

// Keeps the first max_codepoints code points. Input must be valid UTF-8.
std::string utf8_prefix(std::string_view s, std::size_t max_codepoints);

// Lowercase, non-alphanumerics become '_'; leading digit gets a "t_" prefix.
std::string sanitize_identifier(std::string_view s);

// Levenshtein distance over bytes divided by the longer length; 0 for two
// empty strings.
double normalized_edit_distance(std::string_view a, std::string_view b);

// Lowercase and collapse whitespace runs; used for duplicate detection.
std::string normalize_for_compare(std::string_view s);

}  // namespace dabench::text
