#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "foresight/chunk_layout.hpp"
#include "foresight/matrix.hpp"
#include "foresight/sparse_mask.hpp"

namespace foresight {

// Token-level visibility matrix; visible(i, j) means query i may attend key j.
class TokenMask {
 public:
  TokenMask() = default;
  explicit TokenMask(std::size_t n, bool value = false) : n_(n), bits_(n * n, value ? 1 : 0) {}

  std::size_t size() const { return n_; }
  bool operator()(std::size_t i, std::size_t j) const { return bits_[i * n_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { bits_[i * n_ + j] = v ? 1 : 0; }
  std::size_t count() const;

  friend bool operator==(const TokenMask&, const TokenMask&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> bits_;
};

// softmax(Q K^T / sqrt(d)) V restricted to visible keys, with max subtraction.
// Rows with no visible key produce zeros.
Matrix dense_attention(const Matrix& q, const Matrix& k, const Matrix& v, const TokenMask& mask);

struct ExecutorCounters {
  // Score evaluations attempted, counting whole block_size x block_size tiles.
  std::uint64_t touched = 0;
  std::uint64_t tiles = 0;
};

// Visits only the active tiles of `mask`, accumulating each query row with an
// online softmax in ascending key-block order. Q, K, V must have
// grid.padded_len() rows; padding slots are ignored. `workers` > 1 splits
// query block rows across threads; the result does not depend on it.
Matrix block_sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v, const BlockMask& mask,
                              const BlockGrid& grid, ExecutorCounters* counters = nullptr, int workers = 1);

TokenMask expand_block_mask(const BlockMask& mask, const BlockGrid& grid);

// Flop model: 2d per score plus 2d per weighted accumulate, per token pair.
std::uint64_t attention_flops(std::uint64_t block_pairs, int block_size, int head_dim);

struct FlopReport {
  int n_chunks = 0;
  std::uint64_t active_pairs = 0;
  std::uint64_t dense_pairs = 0;
  std::uint64_t estimated_flops_sparse = 0;
  std::uint64_t estimated_flops_dense = 0;
  double wall_time_sparse = 0.0;  // seconds, median over repeats
  double wall_time_dense = 0.0;

  double speedup() const { return wall_time_sparse > 0 ? wall_time_dense / wall_time_sparse : 0.0; }
};

struct BenchmarkSpec {
  std::vector<int> n_chunks{4, 8, 16, 32};
  LayoutConfig layout{};
  MaskConfig mask{};
  int head_dim = 64;
  int repeats = 5;
  int head_group = 0;
  std::uint64_t seed = 7;
  int workers = 1;
  // Skip wall-clock timing and report counts only.
  bool counts_only = false;
};

std::vector<FlopReport> benchmark(const BenchmarkSpec& spec);

// Header: n_chunks,active_pairs,dense_pairs,t_sparse_ms,t_dense_ms,speedup
void write_benchmark_csv(std::ostream& out, const std::vector<FlopReport>& rows);
extern const char* const kBenchmarkCsvHeader;

// Random padded inputs for a grid; padding rows are zero.
struct AttentionInputs {
  Matrix q, k, v;
};
AttentionInputs random_attention_inputs(const BlockGrid& grid, int head_dim, std::uint64_t seed, double scale = 1.0);

}  // namespace foresight
