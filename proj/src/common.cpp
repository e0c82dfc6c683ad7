#include "cprobe/common.hpp"

#include "cprobe/error.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

namespace cprobe {

std::string_view to_string(RepresentativeKind kind) {
  switch (kind) {
    case RepresentativeKind::nth:
      return "nth";
    case RepresentativeKind::mean:
      return "mean";
    case RepresentativeKind::token_level:
      return "token_level";
  }
  return "unknown";
}

RepresentativeKind parse_kind(std::string_view text) {
  if (text == "nth") return RepresentativeKind::nth;
  if (text == "mean") return RepresentativeKind::mean;
  if (text == "token_level") return RepresentativeKind::token_level;
  throw SchemaError("unknown representative kind '" + std::string(text) + "'");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "unknown";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw SchemaError("unknown split '" + std::string(text) + "'");
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) {
    throw RangeError("Rng::below called with n = 0");
  }
  // Rejection sampling on the top of the range keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t draw = engine_();
  while (draw >= limit) {
    draw = engine_();
  }
  return draw % n;
}

double Rng::normal() {
  if (spare_) {
    const double value = *spare_;
    spare_.reset();
    return value;
  }
  double u1 = uniform();
  while (u1 <= 0.0) {
    u1 = uniform();
  }
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  return radius * std::cos(angle);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t state) {
  for (const char c : bytes) {
    state ^= static_cast<unsigned char>(c);
    state *= 0x100000001b3ULL;
  }
  return state;
}

std::string to_hex(std::uint64_t value) {
  std::array<char, 17> buf{};
  std::snprintf(buf.data(), buf.size(), "%016llx", static_cast<unsigned long long>(value));
  return std::string(buf.data());
}

std::string hash_file(const std::filesystem::path& path) {
  return to_hex(fnv1a64(read_text_file(path)));
}

std::string hash_path(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) {
    throw IoError("cannot hash missing path " + path.string());
  }
  if (!fs::is_directory(path)) {
    return hash_file(path);
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(path)) {
    if (entry.is_regular_file()) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::uint64_t state = 0xcbf29ce484222325ULL;
  for (const auto& file : files) {
    state = fnv1a64(fs::relative(file, path).generic_string(), state);
    state = fnv1a64(read_text_file(file), state);
  }
  return to_hex(state);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("failed to open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("failed to open " + path.string() + " for writing");
  }
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) {
    throw IoError("failed to write " + path.string());
  }
}

namespace {

template <class T>
std::string format_floating(T value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto result = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), result.ptr);
}

}  // namespace

std::string format_number(double value) { return format_floating(value); }
std::string format_number(float value) { return format_floating(value); }

std::string utc_now_iso8601() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::array<char, 32> buf{};
  std::strftime(buf.data(), buf.size(), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return std::string(buf.data());
}

std::string to_lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) {
    return {};
  }
  const auto last = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(first, last - first + 1));
}

std::vector<int> parse_int_list(std::string_view text) {
  std::vector<int> values;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto piece = trim(text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (!piece.empty()) {
      int value = 0;
      const auto result = std::from_chars(piece.data(), piece.data() + piece.size(), value);
      if (result.ec != std::errc{} || result.ptr != piece.data() + piece.size()) {
        throw SchemaError("not an integer: '" + piece + "'");
      }
      values.push_back(value);
    }
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return values;
}

}  // namespace cprobe
