#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include <nlohmann/json.hpp>

#include "foresight/errors.hpp"
#include "foresight/sparse_mask.hpp"

using namespace foresight;

namespace {

LayoutConfig tiny_layout() {
  LayoutConfig c;
  c.system_prompt_len = 2;
  c.text_len_per_chunk = 2;
  c.obs_frames_per_chunk = 2;
  c.tokens_per_frame_per_view = 1;
  c.n_views = 3;
  c.action_len_per_chunk = 2;
  c.query_len_per_chunk = 2;
  c.block_size = 2;
  return c;
}

// Straight transcription of the five rules, one pair at a time.
bool oracle_allows(const Block& q, const Block& k, const MaskConfig& cfg, int group) {
  if (q.is_padding || k.is_padding) return false;
  if (k.kind == SegmentKind::System) return true;           // sink
  if (q.kind == SegmentKind::System) return false;
  if (q.chunk == k.chunk) return true;                      // intra-chunk
  if (k.chunk > q.chunk) return false;                      // causal
  if (!is_prompt_side(k.kind)) return false;                // earlier queries are never keys
  const int d = q.chunk - k.chunk;
  const bool parity = d % 2 == group;
  if (q.kind == SegmentKind::Query) return parity || cfg.query_exempt_from_parity;
  if (!parity) return false;
  int r = cfg.neighborhood_base_radius;
  if (cfg.neighborhood_shrink == ShrinkRule::Halving) {
    for (int i = 1; i < d; ++i) r /= 2;
  }
  return std::abs(q.intra_chunk_offset - k.intra_chunk_offset) <= r;
}

}  // namespace

TEST_CASE("neighborhood radius") {
  MaskConfig halving;
  halving.neighborhood_base_radius = 4;
  CHECK(neighborhood_radius(halving, 1) == 4);
  CHECK(neighborhood_radius(halving, 2) == 2);
  CHECK(neighborhood_radius(halving, 3) == 1);
  CHECK(neighborhood_radius(halving, 4) == 0);
  CHECK(neighborhood_radius(halving, 9) == 0);
  MaskConfig constant = halving;
  constant.neighborhood_shrink = ShrinkRule::Constant;
  CHECK(neighborhood_radius(constant, 7) == 4);
  CHECK_THROWS_AS(neighborhood_radius(halving, 0), DomainError);
}

TEST_CASE("mask matches the rule oracle pair by pair") {
  const auto lc = tiny_layout();
  for (int n_chunks : {1, 2, 5}) {
    for (int radius : {0, 1, 3}) {
      for (auto shrink : {ShrinkRule::Halving, ShrinkRule::Constant}) {
        for (bool exempt : {true, false}) {
          MaskConfig cfg;
          cfg.neighborhood_base_radius = radius;
          cfg.neighborhood_shrink = shrink;
          cfg.query_exempt_from_parity = exempt;
          const auto grid = block_partition(build_prompt_layout(lc, n_chunks), lc.block_size, 4);
          for (int g : {0, 1}) {
            const auto mask = build_mask(grid, cfg, g);
            std::size_t expected = 0;
            for (const auto& q : grid.blocks) {
              for (const auto& k : grid.blocks) {
                const bool want = oracle_allows(q, k, cfg, g);
                expected += want ? 1 : 0;
                if (mask.contains(q.index, k.index) != want) {
                  FAIL("pair (" << q.index << "," << k.index << ") n_chunks " << n_chunks << " radius " << radius
                                << " group " << g);
                }
              }
            }
            CHECK(mask.active_pairs() == expected);
            CHECK(validate_mask(mask, grid, cfg).ok());
          }
        }
      }
    }
  }
}

TEST_CASE("single chunk is dense over the chunk") {
  const auto lc = tiny_layout();
  const auto grid = block_partition(build_prompt_layout(lc, 1), lc.block_size);
  const auto mask = build_mask(grid, MaskConfig{}, 0);
  for (int q = grid.system_blocks; q < grid.n_blocks(); ++q) {
    CHECK(mask.row(q).size() == static_cast<std::size_t>(grid.n_blocks()));
  }
}

TEST_CASE("head groups see complementary chunk distances") {
  const auto lc = tiny_layout();
  const auto grid = block_partition(build_prompt_layout(lc, 4), lc.block_size);
  const auto m0 = build_mask(grid, MaskConfig{}, 0);
  const auto m1 = build_mask(grid, MaskConfig{}, 1);
  CHECK_FALSE(m0 == m1);
  // Counterpart of an OBS block in chunk 3: distance 1 (odd) in group 1 only,
  // distance 2 (even) in group 0 only.
  const int q = grid.chunk_first_block(3) + 1;
  REQUIRE(grid.blocks[static_cast<std::size_t>(q)].kind == SegmentKind::Obs);
  const int c1 = counterpart_block(q, 2, grid);
  const int c2 = counterpart_block(q, 1, grid);
  CHECK(m1.contains(q, c1));
  CHECK_FALSE(m0.contains(q, c1));
  CHECK(m0.contains(q, c2));
  CHECK_FALSE(m1.contains(q, c2));
}

TEST_CASE("validator names the broken rule") {
  const auto lc = tiny_layout();
  MaskConfig cfg;
  const auto grid = block_partition(build_prompt_layout(lc, 3), lc.block_size, 4);
  const auto mask = build_mask(grid, cfg, 0);
  // Drop a sink pair.
  const int q = grid.chunk_first_block(2);
  auto r1 = validate_mask(mask.without_pair(q, 0), grid, cfg);
  CHECK_FALSE(r1.ok());
  CHECK(r1.mentions(MaskRule::R1_Sink));
  CHECK_FALSE(r1.violations.front().unexpected);
  // Add a future key.
  auto r2 = validate_mask(mask.with_pair(grid.chunk_first_block(0), grid.chunk_first_block(2)), grid, cfg);
  CHECK_FALSE(r2.ok());
  CHECK(r2.violations.front().unexpected);
  // Touch a padding block.
  auto r5 = validate_mask(mask.with_pair(q, grid.n_blocks() - 1), grid, cfg);
  REQUIRE(grid.blocks.back().is_padding);
  CHECK(r5.mentions(MaskRule::R5_Padding));
}

TEST_CASE("mask builder rejects bad input") {
  const auto lc = tiny_layout();
  const auto layout = build_prompt_layout(lc, 2);
  CHECK_THROWS_AS(build_mask(naive_block_partition(layout, 4), MaskConfig{}, 0), PreconditionError);
  const auto grid = block_partition(layout, lc.block_size);
  CHECK_THROWS_AS(build_mask(grid, MaskConfig{}, 2), ConfigError);
  MaskConfig bad;
  bad.neighborhood_base_radius = -1;
  CHECK_THROWS_AS(build_mask(grid, bad, 0), ConfigError);
  bad = MaskConfig{};
  bad.parity_groups = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("pair list and pgm serialization") {
  const auto lc = tiny_layout();
  const auto grid = block_partition(build_prompt_layout(lc, 3), lc.block_size);
  const auto mask = build_mask(grid, MaskConfig{}, 1);

  std::stringstream bin;
  write_pair_list(bin, mask);
  CHECK(bin.str().size() == 4 + 8 * mask.active_pairs());
  const auto back = read_pair_list(bin, mask.n_blocks(), 1);
  CHECK(back == mask);

  std::stringstream pgm;
  write_pgm(pgm, mask);
  const std::string s = pgm.str();
  const std::string header = "P5\n" + std::to_string(grid.n_blocks()) + " " + std::to_string(grid.n_blocks()) + "\n255\n";
  REQUIRE(s.rfind(header, 0) == 0);
  CHECK(s.size() == header.size() + static_cast<std::size_t>(grid.n_blocks() * grid.n_blocks()));
  std::size_t lit = 0;
  for (std::size_t i = header.size(); i < s.size(); ++i) {
    lit += static_cast<unsigned char>(s[i]) == 255 ? 1 : 0;
  }
  CHECK(lit == mask.active_pairs());

  const auto stats = active_block_stats(mask);
  CHECK(stats.total_active_pairs == mask.active_pairs());
}

TEST_CASE("mask config json") {
  MaskConfig c;
  c.neighborhood_base_radius = 3;
  c.neighborhood_shrink = ShrinkRule::Constant;
  nlohmann::json j = c;
  CHECK(j["neighborhood_shrink"] == "constant");
  MaskConfig back;
  from_json(j, back);
  CHECK(back.neighborhood_base_radius == 3);
  CHECK(back.neighborhood_shrink == ShrinkRule::Constant);
  j["extra"] = true;
  CHECK_THROWS_AS(from_json(j, back), ConfigError);
}
