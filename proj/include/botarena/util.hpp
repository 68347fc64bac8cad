#pragma once

// Shared plumbing: error types, hashing, UTF-8 helpers, deterministic number
// formatting, ISO-8601 timestamps, small file utilities.

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace botarena {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Parse failure in an input file; message carries file:line context.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Config or argument validation failure. Collects every violated field so a
// single run reports all problems at once.
class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<std::string> fields);
  const std::vector<std::string>& fields() const { return fields_; }

 private:
  std::vector<std::string> fields_;
};

// ---------------------------------------------------------------------------
// Hashing (FNV-1a 64-bit). Used for feature hashing and artifact digests;
// fixed constants keep results identical across platforms and runs.
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a_u64(std::uint64_t x, std::uint64_t h = kFnvOffset) {
  for (int i = 0; i < 8; ++i) {
    h ^= (x >> (8 * i)) & 0xffu;
    h *= kFnvPrime;
  }
  return h;
}

std::string hex64(std::uint64_t v);

// ---------------------------------------------------------------------------
// UTF-8
// ---------------------------------------------------------------------------

// Decodes UTF-8; malformed bytes become U+FFFD (one replacement per bad byte).
std::vector<char32_t> utf8_decode(std::string_view text);

void utf8_append(std::string& out, char32_t cp);

// Truncates to at most max_codepoints without splitting a code point.
std::string utf8_truncate(std::string_view text, std::size_t max_codepoints);

std::size_t utf8_length(std::string_view text);

// ---------------------------------------------------------------------------
// Strings and numbers
// ---------------------------------------------------------------------------

std::vector<std::string> split(std::string_view s, char delim);
std::string trim(std::string_view s);
std::string to_lower_ascii(std::string_view s);

// Fixed printf-style formatting so emitted CSV/SVG bytes are reproducible.
std::string format_double(double v, int significant = 12);

// Strict double parse; whole string must be consumed.
double parse_double(std::string_view s);
std::int64_t parse_int(std::string_view s);

// ---------------------------------------------------------------------------
// Timestamps. Accepts YYYY-MM-DD[THH:MM:SS[.fff]][Z] and returns a sortable
// value in milliseconds since the civil epoch (no timezone math beyond Z).
// ---------------------------------------------------------------------------

std::int64_t parse_iso8601(std::string_view s);

// Renders whole seconds as YYYY-MM-DDTHH:MM:SSZ (fractional part dropped).
std::string format_iso8601(std::int64_t ms);

// True for code points in the common emoji blocks; used for stylistic rates
// and for keeping symbols out of word tokens.
bool is_emoji_codepoint(char32_t cp);

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);
void ensure_dir(const std::filesystem::path& dir);

}  // namespace botarena
