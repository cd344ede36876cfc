#include "foresight/sparse_mask.hpp"

#include <algorithm>
#include <array>
#include <istream>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "foresight/errors.hpp"

namespace foresight {

void MaskConfig::validate() const {
  if (neighborhood_base_radius < 0) {
    throw ConfigError("mask: neighborhood_base_radius must be >= 0");
  }
  if (parity_groups != 2) {
    throw ConfigError("mask: parity_groups is fixed at 2");
  }
}

void to_json(nlohmann::json& j, const MaskConfig& m) {
  j = nlohmann::json{{"neighborhood_base_radius", m.neighborhood_base_radius},
          {"neighborhood_shrink", m.neighborhood_shrink == ShrinkRule::Halving ? "halving" : "constant"},
          {"parity_groups", m.parity_groups},
          {"query_exempt_from_parity", m.query_exempt_from_parity}};
}

void from_json(const nlohmann::json& j, MaskConfig& m) {
  m = MaskConfig{};
  for (const auto& [key, value] : j.items()) {
    if (key == "neighborhood_base_radius") {
      m.neighborhood_base_radius = value.get<int>();
    } else if (key == "neighborhood_shrink") {
      const auto s = value.get<std::string>();
      if (s == "halving") {
        m.neighborhood_shrink = ShrinkRule::Halving;
      } else if (s == "constant") {
        m.neighborhood_shrink = ShrinkRule::Constant;
      } else {
        throw ConfigError("mask: neighborhood_shrink must be 'halving' or 'constant'");
      }
    } else if (key == "parity_groups") {
      m.parity_groups = value.get<int>();
    } else if (key == "query_exempt_from_parity") {
      m.query_exempt_from_parity = value.get<bool>();
    } else {
      throw ConfigError("mask: unknown key '" + key + "'");
    }
  }
}

int neighborhood_radius(const MaskConfig& cfg, int distance) {
  if (distance < 1) {
    throw DomainError("neighborhood_radius: chunk distance must be >= 1");
  }
  switch (cfg.neighborhood_shrink) {
    case ShrinkRule::Constant:
      return cfg.neighborhood_base_radius;
    case ShrinkRule::Halving:
      if (distance - 1 >= 31) {
        return 0;
      }
      return std::max(0, cfg.neighborhood_base_radius >> (distance - 1));
  }
  return 0;
}

BlockMask::BlockMask(int n_blocks, int head_group, std::vector<BlockPair> pairs)
    : n_blocks_(n_blocks), head_group_(head_group) {
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  row_offsets_.assign(static_cast<std::size_t>(n_blocks) + 1, 0);
  cols_.reserve(pairs.size());
  for (const auto& [q, k] : pairs) {
    if (q >= static_cast<std::uint32_t>(n_blocks) || k >= static_cast<std::uint32_t>(n_blocks)) {
      throw PreconditionError("BlockMask: pair references a block outside the grid");
    }
    ++row_offsets_[q + 1];
    cols_.push_back(k);
  }
  for (std::size_t r = 1; r < row_offsets_.size(); ++r) {
    row_offsets_[r] += row_offsets_[r - 1];
  }
}

bool BlockMask::contains(int q, int k) const {
  if (q < 0 || q >= n_blocks_) {
    return false;
  }
  const auto r = row(q);
  return std::binary_search(r.begin(), r.end(), static_cast<std::uint32_t>(k));
}

std::span<const std::uint32_t> BlockMask::row(int q) const {
  const auto b = row_offsets_[static_cast<std::size_t>(q)];
  const auto e = row_offsets_[static_cast<std::size_t>(q) + 1];
  return {cols_.data() + b, e - b};
}

std::vector<BlockPair> BlockMask::pairs() const {
  std::vector<BlockPair> out;
  out.reserve(cols_.size());
  for (int q = 0; q < n_blocks_; ++q) {
    for (auto k : row(q)) {
      out.emplace_back(static_cast<std::uint32_t>(q), k);
    }
  }
  return out;
}

BlockMask BlockMask::with_pair(int q, int k) const {
  auto p = pairs();
  p.emplace_back(static_cast<std::uint32_t>(q), static_cast<std::uint32_t>(k));
  return BlockMask(n_blocks_, head_group_, std::move(p));
}

BlockMask BlockMask::without_pair(int q, int k) const {
  auto p = pairs();
  std::erase(p, BlockPair{static_cast<std::uint32_t>(q), static_cast<std::uint32_t>(k)});
  return BlockMask(n_blocks_, head_group_, std::move(p));
}

namespace {

void check_head_group(int head_group) {
  if (head_group != 0 && head_group != 1) {
    throw ConfigError("head_group must be 0 or 1");
  }
}

int prompt_blocks_per_chunk(const BlockGrid& grid) {
  if (grid.n_chunks == 0) {
    return 0;
  }
  const int first = grid.chunk_first_block(0);
  int n = 0;
  for (int b = first; b < first + grid.blocks_per_chunk; ++b) {
    if (is_prompt_side(grid.blocks[static_cast<std::size_t>(b)].kind)) {
      ++n;
    }
  }
  return n;
}

}  // namespace

BlockMask build_mask(const BlockGrid& grid, const MaskConfig& cfg, int head_group) {
  cfg.validate();
  check_head_group(head_group);
  if (!grid.single_kind()) {
    throw PreconditionError("build_mask: grid has blocks mixing segment kinds; use block_partition");
  }
  const int n_prompt = prompt_blocks_per_chunk(grid);
  std::vector<BlockPair> pairs;
  auto add = [&](int q, int k) { pairs.emplace_back(static_cast<std::uint32_t>(q), static_cast<std::uint32_t>(k)); };

  for (const Block& qb : grid.blocks) {
    if (qb.is_padding) {
      continue;
    }
    // Sinks.
    for (int s = 0; s < grid.system_blocks; ++s) {
      add(qb.index, s);
    }
    if (qb.chunk == kSystemChunk) {
      continue;
    }
    // Whole own chunk, both directions.
    const int own = grid.chunk_first_block(qb.chunk);
    for (int k = own; k < own + grid.blocks_per_chunk; ++k) {
      add(qb.index, k);
    }
    for (int earlier = 0; earlier < qb.chunk; ++earlier) {
      const int distance = qb.chunk - earlier;
      const bool parity_match = distance % 2 == head_group;
      const int base = grid.chunk_first_block(earlier);
      if (qb.kind == SegmentKind::Query) {
        if (!parity_match && !cfg.query_exempt_from_parity) {
          continue;
        }
        for (int off = 0; off < grid.blocks_per_chunk; ++off) {
          if (is_prompt_side(grid.blocks[static_cast<std::size_t>(base + off)].kind)) {
            add(qb.index, base + off);
          }
        }
      } else if (parity_match) {
        const int r = neighborhood_radius(cfg, distance);
        const int lo = std::max(0, qb.intra_chunk_offset - r);
        const int hi = std::min(n_prompt - 1, qb.intra_chunk_offset + r);
        for (int off = lo; off <= hi; ++off) {
          add(qb.index, base + off);
        }
      }
    }
  }
  return BlockMask(grid.n_blocks(), head_group, std::move(pairs));
}

BlockStats active_block_stats(const BlockMask& mask) {
  BlockStats stats;
  stats.per_query_row_counts.resize(static_cast<std::size_t>(mask.n_blocks()));
  for (int q = 0; q < mask.n_blocks(); ++q) {
    const auto n = static_cast<std::uint32_t>(mask.row(q).size());
    stats.per_query_row_counts[static_cast<std::size_t>(q)] = n;
    stats.total_active_pairs += n;
  }
  return stats;
}

std::string to_string(MaskRule rule) { return "R" + std::to_string(static_cast<int>(rule)); }

bool ViolationReport::mentions(MaskRule rule) const {
  return std::any_of(violations.begin(), violations.end(),
                     [rule](const MaskViolation& v) { return v.rule == rule; });
}

namespace {

struct Verdict {
  bool allowed;
  MaskRule rule;
};

// Rule table evaluated independently for one (query, key) block pair.
Verdict classify(const Block& q, const Block& k, const MaskConfig& cfg, int head_group) {
  if (q.is_padding || k.is_padding) {
    return {false, MaskRule::R5_Padding};
  }
  if (k.kind == SegmentKind::System) {
    return {true, MaskRule::R1_Sink};
  }
  if (q.kind == SegmentKind::System) {
    return {false, MaskRule::R1_Sink};
  }
  if (q.chunk == k.chunk) {
    return {true, MaskRule::R2_IntraChunk};
  }
  const MaskRule row_rule = q.kind == SegmentKind::Query ? MaskRule::R4_Query : MaskRule::R3_Counterpart;
  if (k.chunk > q.chunk) {
    return {false, row_rule};
  }
  const int distance = q.chunk - k.chunk;
  const bool parity_match = distance % 2 == head_group;
  if (q.kind == SegmentKind::Query) {
    if (k.kind == SegmentKind::Query) {
      return {false, MaskRule::R4_Query};
    }
    return {parity_match || cfg.query_exempt_from_parity, MaskRule::R4_Query};
  }
  if (!is_prompt_side(k.kind) || !parity_match) {
    return {false, MaskRule::R3_Counterpart};
  }
  const int gap = q.intra_chunk_offset > k.intra_chunk_offset ? q.intra_chunk_offset - k.intra_chunk_offset
                                                              : k.intra_chunk_offset - q.intra_chunk_offset;
  return {gap <= neighborhood_radius(cfg, distance), MaskRule::R3_Counterpart};
}

}  // namespace

ViolationReport validate_mask(const BlockMask& mask, const BlockGrid& grid, const MaskConfig& cfg) {
  ViolationReport report;
  if (mask.n_blocks() != grid.n_blocks()) {
    report.violations.push_back({-1, -1, true, MaskRule::R5_Padding});
    return report;
  }
  for (const Block& q : grid.blocks) {
    for (const Block& k : grid.blocks) {
      const Verdict v = classify(q, k, cfg, mask.head_group());
      const bool active = mask.contains(q.index, k.index);
      if (active != v.allowed) {
        report.violations.push_back({q.index, k.index, active, v.rule});
      }
    }
  }
  return report;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> bytes = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) {
    throw RuntimeFailure("read_pair_list: truncated input");
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_pair_list(std::ostream& out, const BlockMask& mask) {
  put_u32(out, static_cast<std::uint32_t>(mask.active_pairs()));
  for (const auto& [q, k] : mask.pairs()) {
    put_u32(out, q);
    put_u32(out, k);
  }
}

BlockMask read_pair_list(std::istream& in, int n_blocks, int head_group) {
  const std::uint32_t count = get_u32(in);
  std::vector<BlockPair> pairs;
  pairs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto q = get_u32(in);
    const auto k = get_u32(in);
    pairs.emplace_back(q, k);
  }
  return BlockMask(n_blocks, head_group, std::move(pairs));
}

void write_pgm(std::ostream& out, const BlockMask& mask) {
  const int n = mask.n_blocks();
  out << "P5\n" << n << ' ' << n << "\n255\n";
  std::vector<char> line(static_cast<std::size_t>(n));
  for (int q = 0; q < n; ++q) {
    std::fill(line.begin(), line.end(), '\0');
    for (auto k : mask.row(q)) {
      line[k] = static_cast<char>(255);
    }
    out.write(line.data(), n);
  }
}

}  // namespace foresight
