#include "foresight/chunk_layout.hpp"

#include <algorithm>
#include <array>
#include <utility>

#include <nlohmann/json.hpp>

#include "foresight/errors.hpp"

namespace foresight {

namespace {

constexpr std::array<SegmentKind, 4> kChunkOrder = {SegmentKind::Text, SegmentKind::Obs,
                                                    SegmentKind::Action, SegmentKind::Query};

int kind_length(const LayoutConfig& c, SegmentKind kind) {
  switch (kind) {
    case SegmentKind::System:
      return c.system_prompt_len;
    case SegmentKind::Text:
      return c.text_len_per_chunk;
    case SegmentKind::Obs:
      return c.obs_len_per_chunk();
    case SegmentKind::Action:
      return c.action_len_per_chunk;
    case SegmentKind::Query:
      return c.query_len_per_chunk;
    default:
      throw DomainError("kind_length: not a layout segment kind");
  }
}

int ceil_div(int a, int b) { return (a + b - 1) / b; }

}  // namespace

std::string_view to_string(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::System:
      return "SYS";
    case SegmentKind::Text:
      return "TEXT";
    case SegmentKind::Obs:
      return "OBS";
    case SegmentKind::Action:
      return "ACT";
    case SegmentKind::Query:
      return "QUERY";
    case SegmentKind::Padding:
      return "PAD";
    case SegmentKind::Mixed:
      return "MIXED";
  }
  return "?";
}

SegmentKind segment_kind_from_string(std::string_view name) {
  for (auto k : {SegmentKind::System, SegmentKind::Text, SegmentKind::Obs, SegmentKind::Action,
                 SegmentKind::Query, SegmentKind::Padding, SegmentKind::Mixed}) {
    if (to_string(k) == name) {
      return k;
    }
  }
  throw ConfigError("unknown segment kind '" + std::string(name) + "'");
}

void LayoutConfig::validate() const {
  const std::pair<const char*, int> fields[] = {
      {"system_prompt_len", system_prompt_len},
      {"text_len_per_chunk", text_len_per_chunk},
      {"obs_frames_per_chunk", obs_frames_per_chunk},
      {"tokens_per_frame_per_view", tokens_per_frame_per_view},
      {"n_views", n_views},
      {"action_len_per_chunk", action_len_per_chunk},
      {"query_len_per_chunk", query_len_per_chunk},
      {"block_size", block_size},
  };
  for (const auto& [name, value] : fields) {
    if (value < 1) {
      throw ConfigError(std::string("layout: ") + name + " must be >= 1, got " + std::to_string(value));
    }
  }
}

void to_json(nlohmann::json& j, const LayoutConfig& c) {
  j = nlohmann::json{{"system_prompt_len", c.system_prompt_len},
                     {"text_len_per_chunk", c.text_len_per_chunk},
                     {"obs_frames_per_chunk", c.obs_frames_per_chunk},
                     {"tokens_per_frame_per_view", c.tokens_per_frame_per_view},
                     {"n_views", c.n_views},
                     {"action_len_per_chunk", c.action_len_per_chunk},
                     {"query_len_per_chunk", c.query_len_per_chunk},
                     {"block_size", c.block_size}};
}

void from_json(const nlohmann::json& j, LayoutConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "system_prompt_len") {
      c.system_prompt_len = value.get<int>();
    } else if (key == "text_len_per_chunk") {
      c.text_len_per_chunk = value.get<int>();
    } else if (key == "obs_frames_per_chunk") {
      c.obs_frames_per_chunk = value.get<int>();
    } else if (key == "tokens_per_frame_per_view") {
      c.tokens_per_frame_per_view = value.get<int>();
    } else if (key == "n_views") {
      c.n_views = value.get<int>();
    } else if (key == "action_len_per_chunk") {
      c.action_len_per_chunk = value.get<int>();
    } else if (key == "query_len_per_chunk") {
      c.query_len_per_chunk = value.get<int>();
    } else if (key == "block_size") {
      c.block_size = value.get<int>();
    } else {
      throw ConfigError("layout: unknown key '" + key + "'");
    }
  }
}

const Segment& PromptLayout::segment(int chunk, SegmentKind kind) const {
  for (const auto& s : segments) {
    if (s.chunk == chunk && s.kind == kind) {
      return s;
    }
  }
  throw DomainError("PromptLayout::segment: no " + std::string(to_string(kind)) + " segment in chunk " +
                    std::to_string(chunk));
}

PromptLayout build_prompt_layout(const LayoutConfig& config, int n_chunks) {
  config.validate();
  if (n_chunks < 1) {
    throw ConfigError("build_prompt_layout: n_chunks must be >= 1, got " + std::to_string(n_chunks));
  }
  PromptLayout layout{config, n_chunks, {}};
  layout.segments.reserve(1 + 4 * static_cast<std::size_t>(n_chunks));
  int cursor = 0;
  layout.segments.push_back({kSystemChunk, SegmentKind::System, 0, config.system_prompt_len});
  cursor = config.system_prompt_len;
  for (int c = 0; c < n_chunks; ++c) {
    for (SegmentKind kind : kChunkOrder) {
      const int len = kind_length(config, kind);
      layout.segments.push_back({c, kind, cursor, cursor + len});
      cursor += len;
    }
  }
  return layout;
}

nlohmann::json layout_to_json(const PromptLayout& layout) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : layout.segments) {
    segs.push_back({{"chunk", s.chunk == kSystemChunk ? nlohmann::json("SYSTEM") : nlohmann::json(s.chunk)},
                    {"kind", to_string(s.kind)},
                    {"begin", s.begin},
                    {"end", s.end}});
  }
  return {{"config", layout.config},
          {"n_chunks", layout.n_chunks},
          {"total_tokens", layout.total_tokens()},
          {"segments", segs}};
}

int BlockGrid::chunk_first_block(int chunk) const {
  if (chunk == kSystemChunk) {
    return 0;
  }
  if (chunk < 0 || chunk >= n_chunks) {
    throw DomainError("BlockGrid::chunk_first_block: chunk out of range");
  }
  return system_blocks + chunk * blocks_per_chunk;
}

std::vector<int> BlockGrid::padded_to_source() const {
  std::vector<int> map(static_cast<std::size_t>(padded_len()), -1);
  for (const auto& b : blocks) {
    for (int t = 0; t < b.valid_tokens; ++t) {
      map[static_cast<std::size_t>(b.index * block_size + t)] = b.source_begin + t;
    }
  }
  return map;
}

std::vector<int> BlockGrid::source_to_padded() const {
  std::vector<int> map(static_cast<std::size_t>(total_tokens_unpadded), -1);
  for (const auto& b : blocks) {
    for (int t = 0; t < b.valid_tokens; ++t) {
      map[static_cast<std::size_t>(b.source_begin + t)] = b.index * block_size + t;
    }
  }
  return map;
}

bool BlockGrid::single_kind() const {
  return std::none_of(blocks.begin(), blocks.end(), [](const Block& b) { return b.kind == SegmentKind::Mixed; });
}

BlockGrid block_partition(const PromptLayout& layout, int block_size, int pad_blocks_to_multiple) {
  if (block_size < 1) {
    throw ConfigError("block_partition: block_size must be >= 1");
  }
  if (pad_blocks_to_multiple < 1) {
    throw ConfigError("block_partition: pad_blocks_to_multiple must be >= 1");
  }
  if (layout.segments.empty()) {
    throw ConfigError("block_partition: empty layout");
  }
  BlockGrid grid;
  grid.block_size = block_size;
  grid.n_chunks = layout.n_chunks;
  grid.total_tokens_unpadded = layout.total_tokens();

  int current_chunk = kSystemChunk;
  int offset_in_chunk = 0;
  for (const auto& seg : layout.segments) {
    if (seg.chunk != current_chunk) {
      current_chunk = seg.chunk;
      offset_in_chunk = 0;
    }
    const int n = ceil_div(seg.length(), block_size);
    for (int i = 0; i < n; ++i) {
      Block b;
      b.index = grid.n_blocks();
      b.chunk = seg.chunk;
      b.kind = seg.kind;
      b.intra_chunk_offset = offset_in_chunk++;
      b.source_begin = seg.begin + i * block_size;
      b.valid_tokens = std::min(block_size, seg.end - b.source_begin);
      grid.blocks.push_back(b);
    }
  }
  grid.system_blocks = ceil_div(layout.config.system_prompt_len, block_size);
  grid.blocks_per_chunk = (grid.n_blocks() - grid.system_blocks) / std::max(1, layout.n_chunks);

  while (grid.n_blocks() % pad_blocks_to_multiple != 0) {
    Block b;
    b.index = grid.n_blocks();
    b.chunk = kPaddingChunk;
    b.kind = SegmentKind::Padding;
    b.is_padding = true;
    b.source_begin = grid.total_tokens_unpadded;
    b.valid_tokens = 0;
    grid.blocks.push_back(b);
  }
  return grid;
}

BlockGrid naive_block_partition(const PromptLayout& layout, int block_size) {
  if (block_size < 1) {
    throw ConfigError("naive_block_partition: block_size must be >= 1");
  }
  BlockGrid grid;
  grid.block_size = block_size;
  grid.n_chunks = layout.n_chunks;
  grid.total_tokens_unpadded = layout.total_tokens();
  const int total = layout.total_tokens();
  const int n = ceil_div(total, block_size);
  std::size_t seg = 0;
  for (int i = 0; i < n; ++i) {
    Block b;
    b.index = i;
    b.source_begin = i * block_size;
    b.valid_tokens = std::min(block_size, total - b.source_begin);
    while (layout.segments[seg].end <= b.source_begin) {
      ++seg;
    }
    const Segment& first = layout.segments[seg];
    const int last_token = b.source_begin + b.valid_tokens - 1;
    b.chunk = first.chunk;
    b.kind = last_token < first.end ? first.kind : SegmentKind::Mixed;
    grid.blocks.push_back(b);
  }
  return grid;
}

int counterpart_block(int block, int earlier_chunk, const BlockGrid& grid) {
  if (block < 0 || block >= grid.n_blocks()) {
    throw DomainError("counterpart_block: block index out of range");
  }
  const Block& b = grid.blocks[static_cast<std::size_t>(block)];
  if (!is_prompt_side(b.kind)) {
    throw DomainError("counterpart_block: block " + std::to_string(block) + " is " +
                      std::string(to_string(b.kind)) + ", only TEXT/OBS/ACT blocks have counterparts");
  }
  if (earlier_chunk < 0 || earlier_chunk >= b.chunk) {
    throw DomainError("counterpart_block: chunk " + std::to_string(earlier_chunk) +
                      " is not earlier than the block's chunk " + std::to_string(b.chunk));
  }
  const int target = grid.chunk_first_block(earlier_chunk) + b.intra_chunk_offset;
  const Block& c = grid.blocks[static_cast<std::size_t>(target)];
  if (c.kind != b.kind || c.chunk != earlier_chunk || c.intra_chunk_offset != b.intra_chunk_offset) {
    throw PreconditionError("counterpart_block: grid chunks do not share an identical layout");
  }
  return target;
}

}  // namespace foresight
