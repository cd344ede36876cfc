#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace foresight {

enum class SegmentKind : std::uint8_t { System, Text, Obs, Action, Query, Padding, Mixed };

std::string_view to_string(SegmentKind kind);
SegmentKind segment_kind_from_string(std::string_view name);

// TEXT, OBS and ACT tokens form the prompt side of a chunk; QUERY tokens
// trigger predictions.
constexpr bool is_prompt_side(SegmentKind kind) {
  return kind == SegmentKind::Text || kind == SegmentKind::Obs || kind == SegmentKind::Action;
}

constexpr int kSystemChunk = -1;
constexpr int kPaddingChunk = -2;

struct LayoutConfig {
  int system_prompt_len = 8;
  int text_len_per_chunk = 4;
  int obs_frames_per_chunk = 4;
  int tokens_per_frame_per_view = 4;
  int n_views = 3;
  int action_len_per_chunk = 4;
  int query_len_per_chunk = 8;
  int block_size = 32;

  int obs_len_per_chunk() const { return obs_frames_per_chunk * tokens_per_frame_per_view * n_views; }
  int chunk_len() const {
    return text_len_per_chunk + obs_len_per_chunk() + action_len_per_chunk + query_len_per_chunk;
  }
  // Throws ConfigError naming the first non-positive field.
  void validate() const;

  friend bool operator==(const LayoutConfig&, const LayoutConfig&) = default;
};

void to_json(nlohmann::json& j, const LayoutConfig& c);
void from_json(const nlohmann::json& j, LayoutConfig& c);

struct Segment {
  int chunk = kSystemChunk;
  SegmentKind kind = SegmentKind::System;
  int begin = 0;  // half-open token span [begin, end)
  int end = 0;

  int length() const { return end - begin; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

struct PromptLayout {
  LayoutConfig config;
  int n_chunks = 0;
  std::vector<Segment> segments;

  int total_tokens() const { return segments.empty() ? 0 : segments.back().end; }
  // Segment of the given chunk and kind; throws DomainError if absent.
  const Segment& segment(int chunk, SegmentKind kind) const;
};

PromptLayout build_prompt_layout(const LayoutConfig& config, int n_chunks);

nlohmann::json layout_to_json(const PromptLayout& layout);

struct Block {
  int index = 0;
  int chunk = kSystemChunk;
  SegmentKind kind = SegmentKind::System;
  // Position of the block among the blocks of its chunk (across kinds).
  int intra_chunk_offset = 0;
  bool is_padding = false;
  // Real tokens occupy the first valid_tokens slots of the block and map to
  // unpadded token indices [source_begin, source_begin + valid_tokens).
  int source_begin = 0;
  int valid_tokens = 0;

  friend bool operator==(const Block&, const Block&) = default;
};

struct BlockGrid {
  int block_size = 1;
  int n_chunks = 0;
  int total_tokens_unpadded = 0;
  int system_blocks = 0;
  int blocks_per_chunk = 0;
  std::vector<Block> blocks;

  int n_blocks() const { return static_cast<int>(blocks.size()); }
  int padded_len() const { return n_blocks() * block_size; }
  // First block of a chunk (kSystemChunk allowed).
  int chunk_first_block(int chunk) const;
  // Unpadded token index for each padded position, -1 for padding slots.
  std::vector<int> padded_to_source() const;
  // Padded position of every unpadded token.
  std::vector<int> source_to_padded() const;
  bool single_kind() const;
};

// Segment-aligned partition: every segment is padded up to a multiple of
// block_size so no block mixes (chunk, kind). pad_blocks_to_multiple appends
// whole padding blocks until the block count is a multiple of it.
BlockGrid block_partition(const PromptLayout& layout, int block_size, int pad_blocks_to_multiple = 1);
inline BlockGrid block_partition(const PromptLayout& layout) {
  return block_partition(layout, layout.config.block_size);
}

// Packs tokens contiguously without alignment. Blocks that straddle a
// segment boundary are tagged SegmentKind::Mixed. Only used to contrast with
// block_partition and to exercise the mask builder's precondition.
BlockGrid naive_block_partition(const PromptLayout& layout, int block_size);

// Block of earlier_chunk with the same kind and intra-chunk offset as `block`.
int counterpart_block(int block, int earlier_chunk, const BlockGrid& grid);

}  // namespace foresight
