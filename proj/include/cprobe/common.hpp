#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cprobe {

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;

enum class RepresentativeKind { nth, mean, token_level };

std::string_view to_string(RepresentativeKind kind);
RepresentativeKind parse_kind(std::string_view text);

enum class Split { train, val, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

// Portable pseudo-random source. std::mt19937_64's output sequence is fixed by
// the standard, but the std distributions are not, so everything layered on
// top of the engine lives here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform();

  // Uniform on [0, n), unbiased.
  std::uint64_t below(std::uint64_t n);

  // Standard normal via Box-Muller.
  double normal();

  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    shuffle(std::span<T>(items));
  }

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

// splitmix64 finalizer; derives independent stream seeds from one base seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t state = 0xcbf29ce484222325ULL);
std::string to_hex(std::uint64_t value);
std::string hash_file(const std::filesystem::path& path);
// Hashes a file, or every regular file under a directory in sorted path order.
std::string hash_path(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view contents);

// Shortest round-trip decimal representation.
std::string format_number(double value);
std::string format_number(float value);

std::string utc_now_iso8601();

std::string to_lower(std::string_view text);
std::string trim(std::string_view text);

// Parses "1,2,3" style integer lists.
std::vector<int> parse_int_list(std::string_view text);

}  // namespace cprobe
