#include <doctest.h>

#include <cmath>
#include <sstream>

#include "foresight/attention.hpp"
#include "foresight/errors.hpp"
#include "foresight/rng.hpp"

using namespace foresight;

namespace {

// Two-pass softmax without max subtraction; fine for the small logits used here.
Matrix naive_attention(const Matrix& q, const Matrix& k, const Matrix& v, const TokenMask& mask) {
  Matrix out(q.rows(), v.cols());
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (std::size_t i = 0; i < q.rows(); ++i) {
    double z = 0.0;
    std::vector<double> e(k.rows(), 0.0);
    for (std::size_t j = 0; j < k.rows(); ++j) {
      if (!mask(i, j)) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) s += q(i, c) * k(j, c);
      e[j] = std::exp(s * scale);
      z += e[j];
    }
    if (z == 0.0) continue;
    for (std::size_t j = 0; j < k.rows(); ++j) {
      for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) += e[j] / z * v(j, c);
    }
  }
  return out;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& x : m.values()) x = scale * rng.normal();
  return m;
}

LayoutConfig small_layout() {
  LayoutConfig c;
  c.system_prompt_len = 3;
  c.text_len_per_chunk = 2;
  c.obs_frames_per_chunk = 2;
  c.tokens_per_frame_per_view = 2;
  c.n_views = 2;
  c.action_len_per_chunk = 3;
  c.query_len_per_chunk = 2;
  c.block_size = 4;
  return c;
}

}  // namespace

TEST_CASE("dense attention matches the naive softmax") {
  Rng rng(3);
  const auto q = random_matrix(7, 5, rng);
  const auto k = random_matrix(7, 5, rng);
  const auto v = random_matrix(7, 3, rng);
  TokenMask mask(7);
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j <= i; ++j) mask.set(i, j, (i + j) % 3 != 1 || i == j);
  }
  CHECK(max_abs_difference(dense_attention(q, k, v, mask), naive_attention(q, k, v, mask)) < 1e-12);
}

TEST_CASE("fully masked rows are zero and huge logits stay finite") {
  Rng rng(4);
  const auto q = random_matrix(4, 2, rng, 1e3);
  const auto k = random_matrix(4, 2, rng, 1e3);
  const auto v = random_matrix(4, 2, rng);
  TokenMask mask(4, true);
  for (std::size_t j = 0; j < 4; ++j) mask.set(2, j, false);
  const auto out = dense_attention(q, k, v, mask);
  for (double x : out.values()) CHECK(std::isfinite(x));
  CHECK(out(2, 0) == 0.0);
  CHECK(out(2, 1) == 0.0);
}

TEST_CASE("single visible key copies its value") {
  Rng rng(5);
  const auto q = random_matrix(3, 4, rng);
  const auto k = random_matrix(3, 4, rng);
  const auto v = random_matrix(3, 4, rng);
  TokenMask mask(3);
  mask.set(0, 2, true);
  const auto out = dense_attention(q, k, v, mask);
  for (std::size_t c = 0; c < 4; ++c) CHECK(out(0, c) == doctest::Approx(v(2, c)).epsilon(1e-14));
}

TEST_CASE("block sparse executor equals dense over the expanded mask") {
  const auto lc = small_layout();
  for (int n_chunks : {1, 3, 6}) {
    const auto grid = block_partition(build_prompt_layout(lc, n_chunks), lc.block_size, 2);
    for (int g : {0, 1}) {
      const auto mask = build_mask(grid, MaskConfig{}, g);
      const auto in = random_attention_inputs(grid, 8, 100 + n_chunks, 2.0);
      ExecutorCounters counters;
      const auto sparse = block_sparse_attention(in.q, in.k, in.v, mask, grid, &counters);
      const auto tokens = expand_block_mask(mask, grid);
      CHECK(max_relative_difference(sparse, dense_attention(in.q, in.k, in.v, tokens)) < 1e-12);
      CHECK(max_abs_difference(sparse, naive_attention(in.q, in.k, in.v, tokens)) < 1e-10);
      CHECK(counters.tiles == mask.active_pairs());
      CHECK(counters.touched == mask.active_pairs() * 16);
      // Worker count does not change the numbers.
      CHECK(block_sparse_attention(in.q, in.k, in.v, mask, grid, nullptr, 3) == sparse);
    }
  }
}

TEST_CASE("expanded mask only links valid tokens of active blocks") {
  const auto lc = small_layout();
  const auto grid = block_partition(build_prompt_layout(lc, 2), lc.block_size);
  const auto mask = build_mask(grid, MaskConfig{}, 0);
  const auto tokens = expand_block_mask(mask, grid);
  REQUIRE(tokens.size() == static_cast<std::size_t>(grid.padded_len()));
  std::size_t expected = 0;
  for (const auto& [q, k] : mask.pairs()) {
    expected += static_cast<std::size_t>(grid.blocks[q].valid_tokens * grid.blocks[k].valid_tokens);
  }
  CHECK(tokens.count() == expected);
}

TEST_CASE("executor rejects mismatched shapes") {
  const auto lc = small_layout();
  const auto grid = block_partition(build_prompt_layout(lc, 2), lc.block_size);
  const auto mask = build_mask(grid, MaskConfig{}, 0);
  Matrix q(static_cast<std::size_t>(grid.padded_len()) - 1, 4);
  CHECK_THROWS_AS(block_sparse_attention(q, q, q, mask, grid), PreconditionError);
}

TEST_CASE("flop model and counts-only benchmark") {
  CHECK(attention_flops(3, 32, 64) == 3ULL * 32 * 32 * 4 * 64);
  BenchmarkSpec spec;
  spec.counts_only = true;
  const auto rows = benchmark(spec);
  REQUIRE(rows.size() == 4);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].active_pairs > rows[i - 1].active_pairs);
    CHECK(rows[i].active_pairs < rows[i].dense_pairs);
  }
  for (const auto& r : rows) {
    CHECK(r.estimated_flops_sparse * r.dense_pairs == r.estimated_flops_dense * r.active_pairs);
    CHECK(r.wall_time_sparse == 0.0);
  }
  std::ostringstream csv;
  write_benchmark_csv(csv, rows);
  CHECK(csv.str().rfind(std::string(kBenchmarkCsvHeader) + "\n", 0) == 0);

  spec.repeats = 0;
  CHECK_THROWS_AS(benchmark(spec), ConfigError);
}
