#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cotmae {

/// Seeded generator with platform-independent draws.
///
/// The standard distributions are implementation-defined, so every draw the
/// pipeline depends on goes through the helpers here instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  /// Uniform real in [0, 1) with 53 random bits.
  double uniform();

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();

  /// Normal(0, std) truncated to [-2 std, 2 std] by resampling.
  double truncated_normal(double std);

  std::string state() const;
  void restore(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer; used to derive independent seeds from tuples.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

/// Ordering for passage/query ids: numeric ids compare numerically,
/// everything else lexicographically.
bool id_less(std::string_view a, std::string_view b);

std::string trim(std::string_view s);
std::string collapse_whitespace(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);
std::string to_lower_ascii(std::string_view s);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);
std::vector<std::string> read_lines(const std::filesystem::path& path);

/// Two-column `id\ttext` records.
struct TsvRecord {
  std::string id;
  std::string text;
};
std::vector<TsvRecord> read_tsv(const std::filesystem::path& path);
void write_tsv(const std::filesystem::path& path, const std::vector<TsvRecord>& records);

/// printf-style double formatting with `%.*g`.
std::string format_double(double v, int precision = 9);

/// Worker count from COTMAE_THREADS (default 1, minimum 1).
unsigned worker_threads();

}  // namespace cotmae
