#include <doctest.h>

#include <set>

#include <nlohmann/json.hpp>

#include "foresight/chunk_layout.hpp"
#include "foresight/errors.hpp"

using namespace foresight;

namespace {

LayoutConfig small_layout() {
  LayoutConfig c;
  c.system_prompt_len = 5;
  c.text_len_per_chunk = 3;
  c.obs_frames_per_chunk = 2;
  c.tokens_per_frame_per_view = 2;
  c.n_views = 3;
  c.action_len_per_chunk = 2;
  c.query_len_per_chunk = 4;
  c.block_size = 4;
  return c;
}

}  // namespace

TEST_CASE("prompt layout: sys first, then text/obs/act/query per chunk") {
  const auto c = small_layout();
  const auto layout = build_prompt_layout(c, 3);
  REQUIRE(layout.segments.size() == 1 + 3 * 4);
  CHECK(layout.segments[0].kind == SegmentKind::System);
  CHECK(layout.segments[0].length() == 5);
  const SegmentKind order[] = {SegmentKind::Text, SegmentKind::Obs, SegmentKind::Action, SegmentKind::Query};
  for (int ch = 0; ch < 3; ++ch) {
    for (int k = 0; k < 4; ++k) {
      const auto& s = layout.segments[static_cast<std::size_t>(1 + ch * 4 + k)];
      CHECK(s.chunk == ch);
      CHECK(s.kind == order[k]);
    }
  }
  // 5 + 3 * (3 + 12 + 2 + 4)
  CHECK(layout.total_tokens() == 68);
  CHECK(c.chunk_len() == 21);
  // Contiguous, no gaps.
  for (std::size_t i = 1; i < layout.segments.size(); ++i) {
    CHECK(layout.segments[i].begin == layout.segments[i - 1].end);
  }
  CHECK(layout.segment(1, SegmentKind::Obs).begin == 5 + 21 + 3);
  CHECK_THROWS_AS(layout.segment(3, SegmentKind::Obs), DomainError);
}

TEST_CASE("block partition pads each segment to whole blocks") {
  const auto c = small_layout();
  const auto layout = build_prompt_layout(c, 3);
  const auto grid = block_partition(layout, c.block_size);
  // sys ceil(5/4)=2; per chunk ceil(3/4)+ceil(12/4)+ceil(2/4)+ceil(4/4) = 1+3+1+1 = 6
  CHECK(grid.system_blocks == 2);
  CHECK(grid.blocks_per_chunk == 6);
  CHECK(grid.n_blocks() == 2 + 18);
  CHECK(grid.single_kind());
  CHECK(grid.chunk_first_block(2) == 14);

  // Round trip of the token maps.
  const auto to_src = grid.padded_to_source();
  const auto to_pad = grid.source_to_padded();
  int valid = 0;
  for (std::size_t p = 0; p < to_src.size(); ++p) {
    if (to_src[p] >= 0) {
      ++valid;
      CHECK(to_pad[static_cast<std::size_t>(to_src[p])] == static_cast<int>(p));
    }
  }
  CHECK(valid == layout.total_tokens());

  // Every block holds tokens of one (chunk, kind).
  for (const auto& b : grid.blocks) {
    for (int t = 0; t < b.valid_tokens; ++t) {
      const int src = b.source_begin + t;
      bool found = false;
      for (const auto& s : layout.segments) {
        if (src >= s.begin && src < s.end) {
          CHECK(s.chunk == b.chunk);
          CHECK(s.kind == b.kind);
          found = true;
        }
      }
      CHECK(found);
    }
  }
}

TEST_CASE("block partition appends whole padding blocks") {
  const auto c = small_layout();
  const auto grid = block_partition(build_prompt_layout(c, 3), c.block_size, 8);
  CHECK(grid.n_blocks() == 24);
  for (int i = 20; i < 24; ++i) {
    CHECK(grid.blocks[static_cast<std::size_t>(i)].is_padding);
    CHECK(grid.blocks[static_cast<std::size_t>(i)].valid_tokens == 0);
  }
}

TEST_CASE("naive partition straddles segment boundaries") {
  const auto c = small_layout();
  const auto grid = naive_block_partition(build_prompt_layout(c, 2), 4);
  CHECK_FALSE(grid.single_kind());
  // Tokens 4..7 hold the last sys token and three TEXT tokens.
  CHECK(grid.blocks[1].kind == SegmentKind::Mixed);
}

TEST_CASE("counterpart block keeps kind and offset") {
  const auto c = small_layout();
  const auto grid = block_partition(build_prompt_layout(c, 4), c.block_size);
  for (int ch = 1; ch < 4; ++ch) {
    for (int off = 0; off < grid.blocks_per_chunk; ++off) {
      const int b = grid.chunk_first_block(ch) + off;
      const auto& blk = grid.blocks[static_cast<std::size_t>(b)];
      if (!is_prompt_side(blk.kind)) {
        CHECK_THROWS_AS(counterpart_block(b, 0, grid), DomainError);
        continue;
      }
      for (int e = 0; e < ch; ++e) {
        const int cb = counterpart_block(b, e, grid);
        CHECK(cb == grid.chunk_first_block(e) + off);
        CHECK(grid.blocks[static_cast<std::size_t>(cb)].kind == blk.kind);
        // Transitive: the counterpart's counterpart is the direct counterpart.
        for (int e2 = 0; e2 < e; ++e2) {
          CHECK(counterpart_block(cb, e2, grid) == counterpart_block(b, e2, grid));
        }
      }
      CHECK_THROWS_AS(counterpart_block(b, ch, grid), DomainError);
      CHECK_THROWS_AS(counterpart_block(b, ch + 1, grid), DomainError);
    }
  }
  CHECK_THROWS_AS(counterpart_block(0, 0, grid), DomainError);  // SYS
  CHECK_THROWS_AS(counterpart_block(grid.n_blocks(), 0, grid), DomainError);
}

TEST_CASE("layout config validation and json") {
  auto c = small_layout();
  c.n_views = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_views"), ConfigError);

  const auto good = small_layout();
  nlohmann::json j = good;
  LayoutConfig back;
  from_json(j, back);
  CHECK(back == good);
  j["bogus"] = 1;
  CHECK_THROWS_AS(from_json(j, back), ConfigError);

  const auto dumped = layout_to_json(build_prompt_layout(good, 2));
  CHECK(dumped["total_tokens"] == 5 + 2 * 21);
  CHECK(dumped["segments"].size() == 9);
}

TEST_CASE("segment kind names round trip") {
  for (auto k : {SegmentKind::System, SegmentKind::Text, SegmentKind::Obs, SegmentKind::Action,
                 SegmentKind::Query}) {
    CHECK(segment_kind_from_string(to_string(k)) == k);
  }
  CHECK_THROWS_AS(segment_kind_from_string("nope"), ConfigError);
}
