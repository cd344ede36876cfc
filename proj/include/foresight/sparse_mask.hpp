#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "foresight/chunk_layout.hpp"

namespace foresight {

enum class ShrinkRule : std::uint8_t {
  // r(d) = floor(r0 / 2^(d-1)) blocks around the counterpart.
  Halving,
  // r(d) = r0 at every distance.
  Constant,
};

struct MaskConfig {
  int neighborhood_base_radius = 1;
  ShrinkRule neighborhood_shrink = ShrinkRule::Halving;
  int parity_groups = 2;
  bool query_exempt_from_parity = true;

  void validate() const;
};

// neighborhood_shrink is spelled "halving" or "constant"; unknown keys throw.
void to_json(nlohmann::json& j, const MaskConfig& c);
void from_json(const nlohmann::json& j, MaskConfig& c);

// Neighborhood radius (in blocks) around the counterpart at chunk distance
// `distance` >= 1.
int neighborhood_radius(const MaskConfig& cfg, int distance);

using BlockPair = std::pair<std::uint32_t, std::uint32_t>;

// Active (query block, key block) pairs for one head group, stored as sorted
// compressed rows.
class BlockMask {
 public:
  BlockMask() = default;
  // `pairs` need not be sorted; duplicates are removed.
  BlockMask(int n_blocks, int head_group, std::vector<BlockPair> pairs);

  int n_blocks() const { return n_blocks_; }
  int head_group() const { return head_group_; }
  std::size_t active_pairs() const { return cols_.size(); }

  bool contains(int q, int k) const;
  // Key blocks of query row q, ascending.
  std::span<const std::uint32_t> row(int q) const;
  std::vector<BlockPair> pairs() const;

  BlockMask with_pair(int q, int k) const;
  BlockMask without_pair(int q, int k) const;

  friend bool operator==(const BlockMask&, const BlockMask&) = default;

 private:
  int n_blocks_ = 0;
  int head_group_ = 0;
  std::vector<std::uint32_t> row_offsets_{0};
  std::vector<std::uint32_t> cols_;
};

BlockMask build_mask(const BlockGrid& grid, const MaskConfig& cfg, int head_group);

struct BlockStats {
  std::uint64_t total_active_pairs = 0;
  std::vector<std::uint32_t> per_query_row_counts;
};

BlockStats active_block_stats(const BlockMask& mask);

enum class MaskRule : std::uint8_t { R1_Sink = 1, R2_IntraChunk, R3_Counterpart, R4_Query, R5_Padding };
std::string to_string(MaskRule rule);

struct MaskViolation {
  int q_block = 0;
  int k_block = 0;
  // true: the pair is active but the rules forbid it; false: required but absent.
  bool unexpected = false;
  MaskRule rule = MaskRule::R1_Sink;
};

struct ViolationReport {
  std::vector<MaskViolation> violations;
  bool ok() const { return violations.empty(); }
  bool mentions(MaskRule rule) const;
};

// Re-derives the rule set by brute force over every block pair and compares
// it with `mask`.
ViolationReport validate_mask(const BlockMask& mask, const BlockGrid& grid, const MaskConfig& cfg);

// Binary pair list: little-endian u32 count followed by count (q, k) u32 pairs
// in ascending order.
void write_pair_list(std::ostream& out, const BlockMask& mask);
BlockMask read_pair_list(std::istream& in, int n_blocks, int head_group);

// Binary PGM (P5), one pixel per block pair, 255 where active.
void write_pgm(std::ostream& out, const BlockMask& mask);

}  // namespace foresight
