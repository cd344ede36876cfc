#include "foresight/attention.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <thread>

#include "foresight/errors.hpp"
#include "foresight/rng.hpp"

namespace foresight {

std::size_t TokenMask::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

namespace {

void check_qkv(const Matrix& q, const Matrix& k, const Matrix& v) {
  if (q.cols() == 0) {
    throw PreconditionError("attention: head dimension must be >= 1");
  }
  if (q.cols() != k.cols() || k.rows() != v.rows() || q.rows() != k.rows()) {
    throw PreconditionError("attention: Q/K/V shapes disagree");
  }
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s += a[i] * b[i];
  }
  return s;
}

}  // namespace

Matrix dense_attention(const Matrix& q, const Matrix& k, const Matrix& v, const TokenMask& mask) {
  check_qkv(q, k, v);
  const std::size_t n = q.rows();
  const std::size_t d = q.cols();
  const std::size_t dv = v.cols();
  if (mask.size() != n) {
    throw PreconditionError("dense_attention: mask size does not match sequence length");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix out(n, dv);
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    double row_max = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      scores[j] = dot(q.row(i).data(), k.row(j).data(), d) * scale;
      if (mask(i, j)) {
        row_max = std::max(row_max, scores[j]);
      }
    }
    if (row_max == -std::numeric_limits<double>::infinity()) {
      continue;
    }
    double denom = 0.0;
    double* o = out.row(i).data();
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask(i, j)) {
        continue;
      }
      const double p = std::exp(scores[j] - row_max);
      denom += p;
      const double* vj = v.row(j).data();
      for (std::size_t c = 0; c < dv; ++c) {
        o[c] += p * vj[c];
      }
    }
    for (std::size_t c = 0; c < dv; ++c) {
      o[c] /= denom;
    }
  }
  return out;
}

namespace {

void sparse_rows(const Matrix& q, const Matrix& k, const Matrix& v, const BlockMask& mask, const BlockGrid& grid,
                 int row_begin, int row_end, Matrix& out, ExecutorCounters& counters) {
  const std::size_t d = q.cols();
  const std::size_t dv = v.cols();
  const auto bs = static_cast<std::size_t>(grid.block_size);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> tile(bs);
  std::vector<double> acc(dv);
  for (int qb = row_begin; qb < row_end; ++qb) {
    const Block& qblock = grid.blocks[static_cast<std::size_t>(qb)];
    const auto keys = mask.row(qb);
    counters.tiles += keys.size();
    counters.touched += keys.size() * bs * bs;
    if (qblock.is_padding) {
      continue;
    }
    for (int qi = 0; qi < qblock.valid_tokens; ++qi) {
      const std::size_t i = static_cast<std::size_t>(qb) * bs + static_cast<std::size_t>(qi);
      const double* qrow = q.row(i).data();
      double running_max = -std::numeric_limits<double>::infinity();
      double denom = 0.0;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (auto kb : keys) {
        const Block& kblock = grid.blocks[kb];
        const auto valid = static_cast<std::size_t>(kblock.valid_tokens);
        if (valid == 0) {
          continue;
        }
        const std::size_t j0 = static_cast<std::size_t>(kb) * bs;
        double tile_max = -std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < valid; ++t) {
          tile[t] = dot(qrow, k.row(j0 + t).data(), d) * scale;
          tile_max = std::max(tile_max, tile[t]);
        }
        const double new_max = std::max(running_max, tile_max);
        const double rescale = std::exp(running_max - new_max);
        denom *= rescale;
        for (auto& a : acc) {
          a *= rescale;
        }
        for (std::size_t t = 0; t < valid; ++t) {
          const double p = std::exp(tile[t] - new_max);
          denom += p;
          const double* vj = v.row(j0 + t).data();
          for (std::size_t c = 0; c < dv; ++c) {
            acc[c] += p * vj[c];
          }
        }
        running_max = new_max;
      }
      if (denom > 0.0) {
        double* o = out.row(i).data();
        for (std::size_t c = 0; c < dv; ++c) {
          o[c] = acc[c] / denom;
        }
      }
    }
  }
}

}  // namespace

Matrix block_sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v, const BlockMask& mask,
                              const BlockGrid& grid, ExecutorCounters* counters, int workers) {
  check_qkv(q, k, v);
  if (mask.n_blocks() != grid.n_blocks()) {
    throw PreconditionError("block_sparse_attention: mask and grid disagree on block count");
  }
  if (q.rows() != static_cast<std::size_t>(grid.padded_len())) {
    throw PreconditionError("block_sparse_attention: inputs must cover the padded sequence (" +
                            std::to_string(grid.padded_len()) + " rows)");
  }
  Matrix out(q.rows(), v.cols());
  const int n_rows = grid.n_blocks();
  workers = std::clamp(workers, 1, std::max(1, n_rows));
  std::vector<ExecutorCounters> per_worker(static_cast<std::size_t>(workers));
  if (workers == 1) {
    sparse_rows(q, k, v, mask, grid, 0, n_rows, out, per_worker[0]);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n_rows + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const int b = w * chunk;
      const int e = std::min(n_rows, b + chunk);
      pool.emplace_back([&, w, b, e] { sparse_rows(q, k, v, mask, grid, b, e, out, per_worker[static_cast<std::size_t>(w)]); });
    }
    for (auto& t : pool) {
      t.join();
    }
  }
  if (counters != nullptr) {
    for (const auto& c : per_worker) {
      counters->touched += c.touched;
      counters->tiles += c.tiles;
    }
  }
  return out;
}

TokenMask expand_block_mask(const BlockMask& mask, const BlockGrid& grid) {
  if (mask.n_blocks() != grid.n_blocks()) {
    throw PreconditionError("expand_block_mask: mask and grid disagree on block count");
  }
  const auto bs = static_cast<std::size_t>(grid.block_size);
  TokenMask tokens(static_cast<std::size_t>(grid.padded_len()));
  for (int qb = 0; qb < grid.n_blocks(); ++qb) {
    const Block& qblock = grid.blocks[static_cast<std::size_t>(qb)];
    for (auto kb : mask.row(qb)) {
      const Block& kblock = grid.blocks[kb];
      for (int a = 0; a < qblock.valid_tokens; ++a) {
        for (int b = 0; b < kblock.valid_tokens; ++b) {
          tokens.set(static_cast<std::size_t>(qb) * bs + static_cast<std::size_t>(a),
                     static_cast<std::size_t>(kb) * bs + static_cast<std::size_t>(b), true);
        }
      }
    }
  }
  return tokens;
}

std::uint64_t attention_flops(std::uint64_t block_pairs, int block_size, int head_dim) {
  const auto bs = static_cast<std::uint64_t>(block_size);
  return block_pairs * bs * bs * 4ULL * static_cast<std::uint64_t>(head_dim);
}

AttentionInputs random_attention_inputs(const BlockGrid& grid, int head_dim, std::uint64_t seed, double scale) {
  Rng rng(seed);
  const auto n = static_cast<std::size_t>(grid.padded_len());
  const auto d = static_cast<std::size_t>(head_dim);
  AttentionInputs in{Matrix(n, d), Matrix(n, d), Matrix(n, d)};
  const auto valid = grid.padded_to_source();
  for (std::size_t i = 0; i < n; ++i) {
    if (valid[i] < 0) {
      continue;
    }
    for (std::size_t c = 0; c < d; ++c) {
      in.q(i, c) = scale * rng.normal();
      in.k(i, c) = scale * rng.normal();
      in.v(i, c) = rng.normal();
    }
  }
  return in;
}

namespace {

template <class F>
double median_seconds(int repeats, F&& fn) {
  std::vector<double> times;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  const auto n = times.size();
  return n % 2 == 1 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
}

}  // namespace

std::vector<FlopReport> benchmark(const BenchmarkSpec& spec) {
  if (spec.repeats < 1) {
    throw ConfigError("benchmark: repeats must be >= 1");
  }
  std::vector<FlopReport> rows;
  for (int n_chunks : spec.n_chunks) {
    const auto layout = build_prompt_layout(spec.layout, n_chunks);
    const auto grid = block_partition(layout, spec.layout.block_size);
    const auto mask = build_mask(grid, spec.mask, spec.head_group);
    FlopReport row;
    row.n_chunks = n_chunks;
    row.active_pairs = mask.active_pairs();
    row.dense_pairs = static_cast<std::uint64_t>(grid.n_blocks()) * static_cast<std::uint64_t>(grid.n_blocks());
    row.estimated_flops_sparse = attention_flops(row.active_pairs, grid.block_size, spec.head_dim);
    row.estimated_flops_dense = attention_flops(row.dense_pairs, grid.block_size, spec.head_dim);
    if (!spec.counts_only) {
      const auto in = random_attention_inputs(grid, spec.head_dim, spec.seed + static_cast<std::uint64_t>(n_chunks));
      const auto tokens = expand_block_mask(mask, grid);
      row.wall_time_sparse = median_seconds(spec.repeats, [&] {
        auto out = block_sparse_attention(in.q, in.k, in.v, mask, grid, nullptr, spec.workers);
        (void)out;
      });
      row.wall_time_dense = median_seconds(spec.repeats, [&] {
        auto out = dense_attention(in.q, in.k, in.v, tokens);
        (void)out;
      });
    }
    rows.push_back(row);
  }
  return rows;
}

const char* const kBenchmarkCsvHeader = "n_chunks,active_pairs,dense_pairs,t_sparse_ms,t_dense_ms,speedup";

void write_benchmark_csv(std::ostream& out, const std::vector<FlopReport>& rows) {
  out << kBenchmarkCsvHeader << '\n';
  for (const auto& r : rows) {
    out << r.n_chunks << ',' << r.active_pairs << ',' << r.dense_pairs << ',' << r.wall_time_sparse * 1e3 << ','
        << r.wall_time_dense * 1e3 << ',' << r.speedup() << '\n';
  }
}

}  // namespace foresight
