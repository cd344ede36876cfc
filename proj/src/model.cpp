#include "foresight/model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "foresight/autodiff.hpp"
#include "foresight/errors.hpp"
#include "foresight/rng.hpp"

namespace foresight {

LayoutConfig default_model_layout() {
  LayoutConfig c;
  c.system_prompt_len = 4;
  c.text_len_per_chunk = 4;
  c.obs_frames_per_chunk = 4;
  c.tokens_per_frame_per_view = 1;
  c.n_views = 3;
  c.action_len_per_chunk = 4;
  c.query_len_per_chunk = 8;
  c.block_size = 4;
  return c;
}

void ModelConfig::validate() const {
  layout.validate();
  mask.validate();
  if (n_heads < 2 || n_heads % 2 != 0) {
    throw ConfigError("model: n_heads must be even (the two parity groups need an even split), got " +
                      std::to_string(n_heads));
  }
  if (n_heads % mask.parity_groups != 0) {
    throw ConfigError("model: n_heads must be a multiple of parity_groups");
  }
  if (n_layers < 1 || n_layers > 4) {
    throw ConfigError("model: n_layers must lie in [1, 4]");
  }
  if (d_model < 1 || ff_dim < 1 || latent_dim < 1 || bev_dim < 1 || max_action_steps < 1 || max_chunks < 1) {
    throw ConfigError("model: dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model: d_model must be divisible by n_heads");
  }
  if (latent_dim % layout.tokens_per_frame_per_view != 0) {
    throw ConfigError("model: latent_dim must be divisible by tokens_per_frame_per_view");
  }
  if (layout.query_len_per_chunk < 2) {
    throw ConfigError("model: need at least two query tokens per chunk (action and BEV heads)");
  }
  const int bs = layout.block_size;
  for (int len : {layout.system_prompt_len, layout.text_len_per_chunk, layout.obs_len_per_chunk(),
                  layout.action_len_per_chunk, layout.query_len_per_chunk}) {
    if (len % bs != 0) {
      throw ConfigError("model: every segment length must be a multiple of block_size " + std::to_string(bs));
    }
  }
  if (!(head_init_scale >= 0.0)) {
    throw ConfigError("model: head_init_scale must be >= 0");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},
                     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"ff_dim", c.ff_dim},
                     {"layout", c.layout},
                     {"mask", c.mask},
                     {"latent_dim", c.latent_dim},
                     {"bev_dim", c.bev_dim},
                     {"max_action_steps", c.max_action_steps},
                     {"max_chunks", c.max_chunks},
                     {"head_init_scale", c.head_init_scale},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "d_model") {
      c.d_model = value.get<int>();
    } else if (key == "n_layers") {
      c.n_layers = value.get<int>();
    } else if (key == "n_heads") {
      c.n_heads = value.get<int>();
    } else if (key == "ff_dim") {
      c.ff_dim = value.get<int>();
    } else if (key == "layout") {
      c.layout = value.get<LayoutConfig>();
    } else if (key == "mask") {
      from_json(value, c.mask);
    } else if (key == "latent_dim") {
      c.latent_dim = value.get<int>();
    } else if (key == "bev_dim") {
      c.bev_dim = value.get<int>();
    } else if (key == "max_action_steps") {
      c.max_action_steps = value.get<int>();
    } else if (key == "max_chunks") {
      c.max_chunks = value.get<int>();
    } else if (key == "head_init_scale") {
      c.head_init_scale = value.get<double>();
    } else if (key == "seed") {
      c.seed = value.get<std::uint64_t>();
    } else {
      throw ConfigError("model: unknown key '" + key + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

enum class Init { Zero, One, Identity, Embedding, Linear, Head };

struct ParamSpec {
  std::string name;
  std::size_t rows, cols;
  Init init;
};

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto ff = static_cast<std::size_t>(c.ff_dim);
  const auto td = static_cast<std::size_t>(c.token_dim());
  const auto& L = c.layout;
  const auto chunk_len = static_cast<std::size_t>(L.chunk_len());
  const auto sys = static_cast<std::size_t>(L.system_prompt_len);
  const auto frames = static_cast<std::size_t>(L.obs_frames_per_chunk);
  const auto views = static_cast<std::size_t>(L.n_views);
  std::vector<ParamSpec> s = {
      {"sys_emb", sys, d, Init::Embedding},
      {"query_emb", static_cast<std::size_t>(L.query_len_per_chunk), d, Init::Embedding},
      {"pos_emb", sys + chunk_len, d, Init::Embedding},
      {"chunk_emb", static_cast<std::size_t>(c.max_chunks) + 1, d, Init::Embedding},
      {"text_w", 1, d, Init::Linear},
      {"text_b", 1, d, Init::Zero},
      {"obs_w", td, d, Init::Linear},
      {"obs_b", 1, d, Init::Zero},
      {"act_w", kActionDim, d, Init::Linear},
      {"act_b", 1, d, Init::Zero},
  };
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const std::vector<ParamSpec> layer = {
        {p + "ln1_g", 1, d, Init::One},   {p + "ln1_b", 1, d, Init::Zero},  {p + "wq", d, d, Init::Linear},
        {p + "bq", 1, d, Init::Zero},     {p + "wk", d, d, Init::Linear},   {p + "bk", 1, d, Init::Zero},
        {p + "wv", d, d, Init::Linear},   {p + "bv", 1, d, Init::Zero},     {p + "wo", d, d, Init::Linear},
        {p + "bo", 1, d, Init::Zero},     {p + "ln2_g", 1, d, Init::One},   {p + "ln2_b", 1, d, Init::Zero},
        {p + "w1", d, ff, Init::Linear},  {p + "b1", 1, ff, Init::Zero},    {p + "w2", ff, d, Init::Linear},
        {p + "b2", 1, d, Init::Zero},
    };
    s.insert(s.end(), layer.begin(), layer.end());
  }
  const auto acts = static_cast<std::size_t>(kActionDim * c.max_action_steps);
  const std::vector<ParamSpec> heads = {
      {"lnf_g", 1, d, Init::One},
      {"lnf_b", 1, d, Init::Zero},
      {"obs_out_w", d, td, Init::Head},
      {"obs_out_b", 1, td, Init::Zero},
      {"obs_skip", frames * td, frames * td, Init::Identity},
      {"act_out_w", d, acts, Init::Head},
      {"act_out_b", 1, acts, Init::Zero},
      {"act_skip", kActionDim, kActionDim, Init::Identity},
      {"bev_out_w", d, static_cast<std::size_t>(c.bev_dim), Init::Head},
      {"bev_out_b", 1, static_cast<std::size_t>(c.bev_dim), Init::Zero},
      {"bev_skip", views * static_cast<std::size_t>(c.latent_dim), static_cast<std::size_t>(c.bev_dim), Init::Zero},
  };
  s.insert(s.end(), heads.begin(), heads.end());
  return s;
}

constexpr const char* kOutputAdapters[] = {"obs_out_w", "obs_out_b", "obs_skip",  "act_out_w", "act_out_b",
                                           "act_skip",  "bev_out_w", "bev_out_b", "bev_skip"};

}  // namespace

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const double head_std = cfg_.head_init_scale / std::sqrt(static_cast<double>(cfg_.d_model));
  for (const auto& spec : param_specs(cfg_)) {
    Matrix m(spec.rows, spec.cols);
    switch (spec.init) {
      case Init::Zero:
        break;
      case Init::One:
        m.fill(1.0);
        break;
      case Init::Identity:
        for (std::size_t i = 0; i < std::min(spec.rows, spec.cols); ++i) {
          m(i, i) = 1.0;
        }
        break;
      case Init::Embedding:
        for (double& v : m.values()) {
          v = 0.1 * rng.normal();
        }
        break;
      case Init::Linear: {
        const double std = 1.0 / std::sqrt(static_cast<double>(spec.rows));
        for (double& v : m.values()) {
          v = std * rng.normal();
        }
        break;
      }
      case Init::Head:
        for (double& v : m.values()) {
          v = head_std * rng.normal();
        }
        break;
    }
    index_[spec.name] = params_.size();
    params_.push_back({spec.name, std::move(m)});
  }
}

Model::Model(const Model& other) : cfg_(other.cfg_), params_(other.params_), index_(other.index_) {
  std::lock_guard lock(other.cache_mutex_);
  cache_ = other.cache_;
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    cfg_ = other.cfg_;
    params_ = other.params_;
    index_ = other.index_;
    std::scoped_lock lock(cache_mutex_, other.cache_mutex_);
    cache_ = other.cache_;
  }
  return *this;
}

const Matrix& Model::param(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) {
    throw PreconditionError("model: no parameter '" + name + "'");
  }
  return params_[it->second].value;
}

Matrix& Model::param(const std::string& name) {
  return const_cast<Matrix&>(static_cast<const Model&>(*this).param(name));
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    n += p.value.size();
  }
  return n;
}

std::vector<double> Model::flat_parameters() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& p : params_) {
    flat.insert(flat.end(), p.value.values().begin(), p.value.values().end());
  }
  return flat;
}

void Model::set_flat_parameters(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw PreconditionError("model: flat parameter vector has " + std::to_string(flat.size()) + " entries, expected " +
                            std::to_string(parameter_count()));
  }
  std::size_t at = 0;
  for (auto& p : params_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), p.value.size(), p.value.values().begin());
    at += p.value.size();
  }
}

void Model::zero_output_adapters() {
  for (const char* name : kOutputAdapters) {
    param(name).fill(0.0);
  }
}

std::shared_ptr<const Model::Structure> Model::structure(int n_chunks) const {
  std::lock_guard lock(cache_mutex_);
  if (auto it = cache_.find(n_chunks); it != cache_.end()) {
    return it->second;
  }
  auto s = std::make_shared<Structure>();
  s->layout = build_prompt_layout(cfg_.layout, n_chunks);
  s->grid = block_partition(s->layout, cfg_.layout.block_size);
  for (int g = 0; g < cfg_.mask.parity_groups; ++g) {
    s->masks.push_back(build_mask(s->grid, cfg_.mask, g));
  }
  s->plan = ad::make_block_plan(s->grid, s->masks, cfg_.n_heads);
  cache_[n_chunks] = s;
  return s;
}

Model init_model(const ModelConfig& cfg) { return Model(cfg); }

Model make_copy_last_chunk_model(const ModelConfig& cfg) {
  Model m(cfg);
  m.zero_output_adapters();
  for (const char* name : {"obs_skip", "act_skip"}) {
    Matrix& s = m.param(name);
    for (std::size_t i = 0; i < s.rows(); ++i) {
      s(i, i) = 1.0;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward graph

namespace {

int prompt_steps_per_stride(const Model& model, const Prompt& prompt) {
  const auto& cfg = model.config();
  if (prompt.chunks.empty()) {
    throw PreconditionError("forward: empty prompt");
  }
  if (static_cast<int>(prompt.chunks.size()) > cfg.max_chunks) {
    throw PreconditionError("forward: prompt has " + std::to_string(prompt.chunks.size()) +
                            " chunks, the model supports " + std::to_string(cfg.max_chunks));
  }
  const auto& L = cfg.layout;
  const auto frame_rows = static_cast<std::size_t>(L.obs_frames_per_chunk * L.n_views);
  const double stride = prompt.chunks.front().stride_s;
  for (const auto& c : prompt.chunks) {
    if (c.obs.rows() != frame_rows || c.obs.cols() != static_cast<std::size_t>(cfg.latent_dim)) {
      throw PreconditionError("forward: chunk observations must be " + std::to_string(frame_rows) + " x " +
                              std::to_string(cfg.latent_dim));
    }
    if (c.actions.rows() != static_cast<std::size_t>(L.action_len_per_chunk) || c.actions.cols() != kActionDim) {
      throw PreconditionError("forward: chunk actions must be " + std::to_string(L.action_len_per_chunk) + " x 2");
    }
    if (c.stride_s != stride) {
      throw PreconditionError("forward: all chunks of a prompt share one stride");
    }
  }
  const int S = steps_per_stride(stride);
  if (S > cfg.max_action_steps) {
    throw PreconditionError("forward: stride needs " + std::to_string(S) + " action rows, the head has " +
                            std::to_string(cfg.max_action_steps));
  }
  return S;
}

struct GraphOut {
  ad::Var obs, actions, bev;
};

std::vector<std::uint32_t> seg_positions(const Segment& s) {
  std::vector<std::uint32_t> out;
  for (int t = s.begin; t < s.end; ++t) {
    out.push_back(static_cast<std::uint32_t>(t));
  }
  return out;
}

GraphOut build_graph(ad::Tape& tape, const Model& model, const Prompt& prompt, const PromptLayout& layout,
                     std::shared_ptr<const ad::AttentionPlan> plan, std::vector<Matrix>* grads) {
  const auto& cfg = model.config();
  const auto& L = cfg.layout;
  const int S = prompt_steps_per_stride(model, prompt);
  const int C = static_cast<int>(prompt.chunks.size());
  if (layout.n_chunks != C) {
    throw PreconditionError("forward: layout chunk count differs from the prompt");
  }
  const auto n = static_cast<std::size_t>(layout.total_tokens());
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto td = static_cast<std::size_t>(cfg.token_dim());
  const auto V = static_cast<std::size_t>(L.n_views);
  const auto tpf = static_cast<std::size_t>(L.tokens_per_frame_per_view);

  std::map<std::string, ad::Var> P;
  {
    std::size_t i = 0;
    for (const auto& p : model.params()) {
      P[p.name] = tape.parameter(p.value, grads != nullptr ? &(*grads)[i] : nullptr);
      ++i;
    }
  }

  // Token bookkeeping.
  std::vector<std::uint32_t> text_pos, obs_pos, act_pos, query_pos, query_idx;
  std::vector<std::uint32_t> pos_offset(n), chunk_id(n, 0);
  const auto& sys_seg = layout.segment(kSystemChunk, SegmentKind::System);
  for (int t = sys_seg.begin; t < sys_seg.end; ++t) {
    pos_offset[static_cast<std::size_t>(t)] = static_cast<std::uint32_t>(t - sys_seg.begin);
  }
  const std::size_t text_len = static_cast<std::size_t>(L.text_len_per_chunk);
  const std::size_t obs_len = static_cast<std::size_t>(L.obs_len_per_chunk());
  const std::size_t act_len = static_cast<std::size_t>(L.action_len_per_chunk);
  const std::size_t q_len = static_cast<std::size_t>(L.query_len_per_chunk);
  Matrix text_in(static_cast<std::size_t>(C) * text_len, 1);
  Matrix obs_in(static_cast<std::size_t>(C) * obs_len, td);
  Matrix act_in(static_cast<std::size_t>(C) * act_len, kActionDim);
  Matrix last_act(static_cast<std::size_t>(C), kActionDim);
  Matrix avg_act(static_cast<std::size_t>(C), n);
  Matrix avg_bev(static_cast<std::size_t>(C), n);
  const std::size_t q_half = q_len / 2;
  for (int c = 0; c < C; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    const auto& chunk = prompt.chunks[cu];
    const auto& text = layout.segment(c, SegmentKind::Text);
    const int chunk_begin = text.begin;
    for (SegmentKind kind : {SegmentKind::Text, SegmentKind::Obs, SegmentKind::Action, SegmentKind::Query}) {
      const auto& seg = layout.segment(c, kind);
      for (int t = seg.begin; t < seg.end; ++t) {
        pos_offset[static_cast<std::size_t>(t)] = static_cast<std::uint32_t>(L.system_prompt_len + t - chunk_begin);
        chunk_id[static_cast<std::size_t>(t)] = static_cast<std::uint32_t>(c + 1);
      }
    }
    for (auto t : seg_positions(text)) {
      text_pos.push_back(t);
    }
    for (std::size_t i = 0; i < text_len; ++i) {
      text_in(cu * text_len + i, 0) = chunk.stride_s;
    }
    const auto obs_seg = seg_positions(layout.segment(c, SegmentKind::Obs));
    obs_pos.insert(obs_pos.end(), obs_seg.begin(), obs_seg.end());
    for (std::size_t fv = 0; fv < obs_len / tpf; ++fv) {
      for (std::size_t k = 0; k < tpf; ++k) {
        std::copy_n(chunk.obs.row(fv).data() + k * td, td, obs_in.row(cu * obs_len + fv * tpf + k).data());
      }
    }
    (void)V;
    const auto act_seg = seg_positions(layout.segment(c, SegmentKind::Action));
    act_pos.insert(act_pos.end(), act_seg.begin(), act_seg.end());
    for (std::size_t i = 0; i < act_len; ++i) {
      std::copy_n(chunk.actions.row(i).data(), kActionDim, act_in.row(cu * act_len + i).data());
    }
    std::copy_n(chunk.actions.row(act_len - 1).data(), kActionDim, last_act.row(cu).data());
    const auto q_seg = seg_positions(layout.segment(c, SegmentKind::Query));
    for (std::size_t i = 0; i < q_len; ++i) {
      query_pos.push_back(q_seg[i]);
      query_idx.push_back(static_cast<std::uint32_t>(i));
      if (i < q_half) {
        avg_act(cu, q_seg[i]) = 1.0 / static_cast<double>(q_half);
      } else {
        avg_bev(cu, q_seg[i]) = 1.0 / static_cast<double>(q_len - q_half);
      }
    }
  }

  // Input embedding.
  std::vector<std::uint32_t> sys_pos = seg_positions(sys_seg);
  const ad::Var obs_const = tape.constant(obs_in);
  const ad::Var x_sys = tape.scatter_rows(P["sys_emb"], sys_pos, n);
  const ad::Var x_text = tape.scatter_rows(
      tape.add_row(tape.matmul(tape.constant(std::move(text_in)), P["text_w"]), P["text_b"]), text_pos, n);
  const ad::Var x_obs = tape.scatter_rows(tape.add_row(tape.matmul(obs_const, P["obs_w"]), P["obs_b"]), obs_pos, n);
  const ad::Var x_act = tape.scatter_rows(
      tape.add_row(tape.matmul(tape.constant(std::move(act_in)), P["act_w"]), P["act_b"]), act_pos, n);
  const ad::Var x_query = tape.scatter_rows(tape.gather_rows(P["query_emb"], query_idx), query_pos, n);
  const ad::Var x_pos = tape.gather_rows(P["pos_emb"], pos_offset);
  const ad::Var x_chunk = tape.gather_rows(P["chunk_emb"], chunk_id);
  ad::Var x = tape.add(tape.add(tape.add(x_sys, x_text), tape.add(x_obs, x_act)),
                       tape.add(x_query, tape.add(x_pos, x_chunk)));
  (void)d;

  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const ad::Var a = tape.layer_norm(x, P[p + "ln1_g"], P[p + "ln1_b"]);
    const ad::Var q = tape.add_row(tape.matmul(a, P[p + "wq"]), P[p + "bq"]);
    const ad::Var k = tape.add_row(tape.matmul(a, P[p + "wk"]), P[p + "bk"]);
    const ad::Var v = tape.add_row(tape.matmul(a, P[p + "wv"]), P[p + "bv"]);
    const ad::Var o = tape.attention(q, k, v, plan);
    x = tape.add(x, tape.add_row(tape.matmul(o, P[p + "wo"]), P[p + "bo"]));
    const ad::Var b = tape.layer_norm(x, P[p + "ln2_g"], P[p + "ln2_b"]);
    const ad::Var f =
        tape.add_row(tape.matmul(tape.gelu(tape.add_row(tape.matmul(b, P[p + "w1"]), P[p + "b1"])), P[p + "w2"]),
                     P[p + "b2"]);
    x = tape.add(x, f);
  }
  const ad::Var h = tape.layer_norm(x, P["lnf_g"], P["lnf_b"]);

  // Heads.
  GraphOut out{};
  // Skip path: per (chunk, view, sub-token) the chunk's frames side by side,
  // mapped jointly so the identity start can learn temporal extrapolation.
  const std::size_t F = static_cast<std::size_t>(L.obs_frames_per_chunk);
  Matrix frames_side(static_cast<std::size_t>(C) * V * tpf, F * td);
  Matrix newest(static_cast<std::size_t>(C), V * static_cast<std::size_t>(cfg.latent_dim));
  std::vector<std::uint32_t> reorder(static_cast<std::size_t>(C) * obs_len);
  for (std::size_t c = 0; c < static_cast<std::size_t>(C); ++c) {
    const auto& obs = prompt.chunks[c].obs;
    for (std::size_t v = 0; v < V; ++v) {
      std::copy_n(obs.row((F - 1) * V + v).data(), obs.cols(), newest.row(c).data() + v * obs.cols());
      for (std::size_t t = 0; t < tpf; ++t) {
        const std::size_t src = (c * V + v) * tpf + t;
        for (std::size_t f = 0; f < F; ++f) {
          std::copy_n(obs.row(f * V + v).data() + t * td, td, frames_side.row(src).data() + f * td);
          reorder[((c * F + f) * V + v) * tpf + t] = static_cast<std::uint32_t>(src * F + f);
        }
      }
    }
  }
  const ad::Var skip = tape.gather_rows(
      tape.reshape(tape.matmul(tape.constant(std::move(frames_side)), P["obs_skip"]),
                   static_cast<std::size_t>(C) * obs_len, td),
      std::move(reorder));
  const ad::Var obs_tok =
      tape.add(tape.add_row(tape.matmul(tape.gather_rows(h, obs_pos), P["obs_out_w"]), P["obs_out_b"]), skip);
  out.obs = tape.reshape(obs_tok, static_cast<std::size_t>(C) * obs_len / tpf, static_cast<std::size_t>(cfg.latent_dim));

  const auto max_cols = static_cast<std::size_t>(kActionDim * cfg.max_action_steps);
  Matrix tile(kActionDim, max_cols);
  for (std::size_t j = 0; j < static_cast<std::size_t>(cfg.max_action_steps); ++j) {
    for (std::size_t i = 0; i < kActionDim; ++i) {
      tile(i, j * kActionDim + i) = 1.0;
    }
  }
  const ad::Var act_h = tape.matmul(tape.constant(std::move(avg_act)), h);
  const ad::Var act_skip =
      tape.matmul(tape.matmul(tape.constant(std::move(last_act)), P["act_skip"]), tape.constant(std::move(tile)));
  const ad::Var act_full = tape.add(tape.add_row(tape.matmul(act_h, P["act_out_w"]), P["act_out_b"]), act_skip);
  out.actions = tape.reshape(tape.slice_cols(act_full, 0, static_cast<std::size_t>(kActionDim * S)),
                             static_cast<std::size_t>(C * S), kActionDim);

  const ad::Var bev_h = tape.matmul(tape.constant(std::move(avg_bev)), h);
  out.bev = tape.add(tape.add_row(tape.matmul(bev_h, P["bev_out_w"]), P["bev_out_b"]),
                     tape.matmul(tape.constant(std::move(newest)), P["bev_skip"]));
  return out;
}

Predictions collect(const ad::Tape& tape, const GraphOut& g) {
  return {tape.value(g.obs), tape.value(g.actions), tape.value(g.bev)};
}

}  // namespace

Predictions forward(const Model& model, const Prompt& prompt) {
  const auto s = model.structure(static_cast<int>(prompt.chunks.size()));
  ad::Tape tape;
  const auto g = build_graph(tape, model, prompt, s->layout, s->plan, nullptr);
  return collect(tape, g);
}

Predictions forward(const Model& model, const Prompt& prompt, const BlockGrid& grid,
                    const std::vector<BlockMask>& masks) {
  const auto s = model.structure(static_cast<int>(prompt.chunks.size()));
  if (grid.block_size != s->grid.block_size || grid.blocks != s->grid.blocks) {
    throw PreconditionError("forward: grid does not match the prompt layout");
  }
  if (masks.size() != s->masks.size()) {
    throw PreconditionError("forward: expected one mask per head group (" + std::to_string(s->masks.size()) + ")");
  }
  for (std::size_t g = 0; g < masks.size(); ++g) {
    if (masks[g].n_blocks() != grid.n_blocks()) {
      throw PreconditionError("forward: mask for group " + std::to_string(g) + " covers " +
                              std::to_string(masks[g].n_blocks()) + " blocks, grid has " +
                              std::to_string(grid.n_blocks()));
    }
  }
  const auto plan = ad::make_block_plan(grid, masks, model.config().n_heads);
  ad::Tape tape;
  const auto g = build_graph(tape, model, prompt, s->layout, plan, nullptr);
  return collect(tape, g);
}

Predictions forward_dense(const Model& model, const Prompt& prompt, const std::vector<TokenMask>& masks) {
  const auto s = model.structure(static_cast<int>(prompt.chunks.size()));
  if (masks.size() != s->masks.size()) {
    throw PreconditionError("forward: expected one mask per head group");
  }
  for (const auto& m : masks) {
    if (m.size() != static_cast<std::size_t>(s->layout.total_tokens())) {
      throw PreconditionError("forward: token mask size differs from the prompt length");
    }
  }
  const auto plan = ad::make_token_plan(masks, model.config().n_heads);
  ad::Tape tape;
  const auto g = build_graph(tape, model, prompt, s->layout, plan, nullptr);
  return collect(tape, g);
}

// ---------------------------------------------------------------------------
// Training

int min_anchor_step(const ModelConfig& cfg) {
  // Frames reach back F - 1 steps, actions need a preceding position.
  return std::max(cfg.layout.obs_frames_per_chunk - 1, cfg.layout.action_len_per_chunk);
}

int max_anchor_step(const Episode& ep, const CurriculumStage& stage) {
  return ep.n_steps - 1 - stage.horizon * steps_per_stride(stage.stride_s);
}

ChunkInput chunk_from_episode(const Episode& ep, int step, const ModelConfig& cfg, double stride_s) {
  const auto& L = cfg.layout;
  if (ep.n_views != L.n_views || ep.latent_dim != cfg.latent_dim) {
    throw PreconditionError("chunk_from_episode: episode views/latent_dim differ from the model");
  }
  if (step - (L.obs_frames_per_chunk - 1) < 0 || step - L.action_len_per_chunk < 0 || step >= ep.n_steps) {
    throw DomainError("chunk_from_episode: step " + std::to_string(step) + " lacks a full chunk of history");
  }
  const auto V = static_cast<std::size_t>(L.n_views);
  ChunkInput c;
  c.stride_s = stride_s;
  c.obs = Matrix(static_cast<std::size_t>(L.obs_frames_per_chunk) * V, static_cast<std::size_t>(cfg.latent_dim));
  for (int f = 0; f < L.obs_frames_per_chunk; ++f) {
    const int s = step - (L.obs_frames_per_chunk - 1 - f);
    for (std::size_t v = 0; v < V; ++v) {
      const auto src = ep.latent(s, static_cast<int>(v));
      std::copy(src.begin(), src.end(), c.obs.row(static_cast<std::size_t>(f) * V + v).begin());
    }
  }
  c.actions = Matrix(static_cast<std::size_t>(L.action_len_per_chunk), kActionDim);
  for (int i = 0; i < L.action_len_per_chunk; ++i) {
    const auto [dx, dy] = action_at(ep, step - (L.action_len_per_chunk - 1 - i));
    c.actions(static_cast<std::size_t>(i), 0) = dx;
    c.actions(static_cast<std::size_t>(i), 1) = dy;
  }
  return c;
}

TrainingSample make_training_sample(const Episode& ep, int anchor_step, const CurriculumStage& stage,
                                    const ModelConfig& cfg, std::string id) {
  if (anchor_step < min_anchor_step(cfg)) {
    throw DomainError("make_training_sample: anchor " + std::to_string(anchor_step) + " is before step " +
                      std::to_string(min_anchor_step(cfg)));
  }
  const auto targets = assign_targets(ep, anchor_step, stage, cfg.layout.obs_frames_per_chunk);
  const int S = steps_per_stride(stage.stride_s);
  TrainingSample s;
  s.id = id.empty() ? "anchor" + std::to_string(anchor_step) : std::move(id);
  s.prompt.chunks.push_back(chunk_from_episode(ep, anchor_step, cfg, stage.stride_s));
  for (int i = 1; i < stage.horizon; ++i) {
    s.prompt.chunks.push_back(chunk_from_episode(ep, targets.obs_targets[static_cast<std::size_t>(i - 1)].step, cfg,
                                                 stage.stride_s));
  }
  const std::size_t frame_rows = targets.obs_targets.front().latents.rows();
  const auto H = static_cast<std::size_t>(stage.horizon);
  s.obs_target = Matrix(H * frame_rows, static_cast<std::size_t>(cfg.latent_dim));
  s.bev_target = Matrix(H, static_cast<std::size_t>(cfg.bev_dim));
  for (std::size_t i = 0; i < H; ++i) {
    const auto& o = targets.obs_targets[i].latents;
    std::copy(o.values().begin(), o.values().end(), s.obs_target.row(i * frame_rows).begin());
    const auto& b = targets.bev_targets[i].latent;
    if (b.size() != static_cast<std::size_t>(cfg.bev_dim)) {
      throw PreconditionError("make_training_sample: BEV latent size differs from the model's bev_dim");
    }
    std::copy(b.begin(), b.end(), s.bev_target.row(i).begin());
  }
  s.action_target = Matrix(H * static_cast<std::size_t>(S), kActionDim);
  for (std::size_t j = 0; j < targets.action_targets.size(); ++j) {
    s.action_target(j, 0) = targets.action_targets[j].dx;
    s.action_target(j, 1) = targets.action_targets[j].dy;
  }
  return s;
}

LossBreakdown sample_loss(const Model& model, const TrainingSample& sample, const LossWeights& w,
                          std::vector<Matrix>* grads) {
  w.validate();
  if (grads != nullptr && grads->size() != model.params().size()) {
    grads->clear();
    for (const auto& p : model.params()) {
      grads->emplace_back(p.value.rows(), p.value.cols());
    }
  }
  const auto s = model.structure(static_cast<int>(sample.prompt.chunks.size()));
  ad::Tape tape;
  const auto g = build_graph(tape, model, sample.prompt, s->layout, s->plan, grads);
  const auto norm = w.squared_norm ? ad::RowNorm::L2Squared : ad::RowNorm::L2;
  const ad::Var l_act = tape.row_norm_loss(g.actions, sample.action_target, ad::RowNorm::L1,
                                           static_cast<double>(sample.action_target.rows()));
  const ad::Var l_cam =
      tape.row_norm_loss(g.obs, sample.obs_target, norm, static_cast<double>(sample.obs_target.rows()));
  const ad::Var l_bev =
      tape.row_norm_loss(g.bev, sample.bev_target, norm, static_cast<double>(sample.bev_target.rows()));
  const ad::Var total = tape.weighted_sum({{l_act, 1.0}, {l_cam, w.alpha}, {l_bev, w.beta}});
  LossBreakdown out{tape.value(l_act)(0, 0), tape.value(l_cam)(0, 0), tape.value(l_bev)(0, 0),
                    tape.value(total)(0, 0)};
  if (!std::isfinite(out.total)) {
    throw RuntimeFailure("non-finite loss in sample '" + sample.id + "'");
  }
  if (grads != nullptr) {
    tape.backward(total);
  }
  return out;
}

std::vector<double> flat_gradient(const Model& model, const TrainingSample& sample, const LossWeights& w) {
  std::vector<Matrix> grads;
  sample_loss(model, sample, w, &grads);
  std::vector<double> flat;
  for (const auto& g : grads) {
    flat.insert(flat.end(), g.values().begin(), g.values().end());
  }
  return flat;
}

LossBreakdown train_step(Model& model, Optimizer& opt, const std::vector<TrainingSample>& batch,
                         const LossWeights& w, double lr) {
  if (batch.empty()) {
    throw PreconditionError("train_step: empty batch");
  }
  if (!(lr >= 0.0)) {
    throw ConfigError("train_step: learning rate must be >= 0");
  }
  auto& params = model.params();
  std::vector<Matrix> grads;
  for (const auto& p : params) {
    grads.emplace_back(p.value.rows(), p.value.cols());
  }
  LossBreakdown mean;
  for (const auto& sample : batch) {
    const auto l = sample_loss(model, sample, w, &grads);
    mean.action += l.action;
    mean.camera += l.camera;
    mean.bev += l.bev;
    mean.total += l.total;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  mean.action *= inv;
  mean.camera *= inv;
  mean.bev *= inv;
  mean.total *= inv;
  double norm2 = 0.0;
  for (auto& g : grads) {
    for (double& v : g.values()) {
      v *= inv;
      norm2 += v * v;
    }
  }
  const double norm = std::sqrt(norm2);
  if (!std::isfinite(norm)) {
    throw RuntimeFailure("train_step: non-finite gradient");
  }
  const double clip = (opt.clip_norm > 0.0 && norm > opt.clip_norm) ? opt.clip_norm / norm : 1.0;
  if (opt.velocity.size() != params.size()) {
    opt.velocity.clear();
    for (const auto& p : params) {
      opt.velocity.emplace_back(p.value.rows(), p.value.cols());
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& vel = opt.velocity[i].values();
    auto& val = params[i].value.values();
    const auto& g = grads[i].values();
    for (std::size_t j = 0; j < val.size(); ++j) {
      vel[j] = opt.momentum * vel[j] - lr * clip * g[j];
      val[j] += vel[j];
    }
  }
  return mean;
}

// ---------------------------------------------------------------------------
// Rollout

RolloutTrace closed_loop_rollout(const Model& model, const std::vector<ChunkInput>& initial_context, int start_step,
                                 const RolloutOptions& opts) {
  const auto& cfg = model.config();
  const auto& L = cfg.layout;
  if (initial_context.empty()) {
    throw PreconditionError("closed_loop_rollout: the initial context needs at least one chunk");
  }
  const double chunks_f = opts.horizon_s / kChunkDurationS;
  if (!(opts.horizon_s > 0.0) || std::abs(chunks_f - std::round(chunks_f)) > 1e-9) {
    throw ConfigError("closed_loop_rollout: horizon must be a positive multiple of the 1 s chunk duration");
  }
  const double n_chunks_f = opts.horizon_s / opts.stride_s;
  if (std::abs(n_chunks_f - std::round(n_chunks_f)) > 1e-9) {
    throw ConfigError("closed_loop_rollout: horizon must be a multiple of the stride");
  }
  if (opts.latent_aug_sigma < 0.0) {
    throw ConfigError("closed_loop_rollout: latent_aug_sigma must be >= 0");
  }
  const int n_chunks = static_cast<int>(std::lround(n_chunks_f));
  const int S = steps_per_stride(opts.stride_s);
  const int window = opts.window_chunks > 0 ? std::min(opts.window_chunks, cfg.max_chunks) : cfg.max_chunks;
  const auto V = static_cast<std::size_t>(L.n_views);
  const auto F = static_cast<std::size_t>(L.obs_frames_per_chunk);
  const auto act_len = static_cast<std::size_t>(L.action_len_per_chunk);

  RolloutTrace trace;
  trace.state.context = initial_context;
  for (auto& c : trace.state.context) {
    c.stride_s = opts.stride_s;
  }
  trace.state.latent_sink = trace.state.context.front();
  trace.state.current_step = start_step;
  trace.actions = Matrix(static_cast<std::size_t>(n_chunks * S), kActionDim);

  double rms = 0.0;
  std::size_t count = 0;
  for (const auto& c : trace.state.context) {
    for (double v : c.obs.values()) {
      rms += v * v;
      ++count;
    }
  }
  rms = count > 0 ? std::sqrt(rms / static_cast<double>(count)) : 0.0;
  Rng rng(opts.seed);
  const bool augment = opts.training_mode && opts.latent_aug_sigma > 0.0;

  for (int step = 0; step < n_chunks; ++step) {
    auto& ctx = trace.state.context;
    Prompt prompt;
    const bool sink = opts.use_latent_sink && window >= 2 && static_cast<int>(ctx.size()) > window;
    if (sink) {
      prompt.chunks.push_back(trace.state.latent_sink);
      prompt.chunks.insert(prompt.chunks.end(), ctx.end() - (window - 1), ctx.end());
    } else {
      const int take = std::min(window, static_cast<int>(ctx.size()));
      prompt.chunks.assign(ctx.end() - take, ctx.end());
    }
    const Predictions pred = forward(model, prompt);
    const std::size_t last = prompt.chunks.size() - 1;

    Predictions next;
    next.obs = Matrix(F * V, static_cast<std::size_t>(cfg.latent_dim));
    std::copy_n(pred.obs.row(last * F * V).data(), next.obs.size(), next.obs.data());
    next.actions = Matrix(static_cast<std::size_t>(S), kActionDim);
    std::copy_n(pred.actions.row(last * static_cast<std::size_t>(S)).data(), next.actions.size(), next.actions.data());
    next.bev = Matrix(1, pred.bev.cols());
    std::copy_n(pred.bev.row(last).data(), pred.bev.cols(), next.bev.data());

    ChunkInput chunk;
    chunk.stride_s = opts.stride_s;
    chunk.obs = Matrix(next.obs.rows(), next.obs.cols());
    for (std::size_t r = 0; r < next.obs.rows(); ++r) {
      const auto frame = decode_latent(next.obs.row(r), opts.frame_dim);
      const auto latent = encode_observation(frame, cfg.latent_dim);
      std::copy(latent.begin(), latent.end(), chunk.obs.row(r).begin());
    }
    const int chunk_end = trace.state.current_step + S;
    for (std::size_t f = 0; f < F; ++f) {
      Matrix frame(V, static_cast<std::size_t>(cfg.latent_dim));
      std::copy_n(chunk.obs.row(f * V).data(), frame.size(), frame.data());
      trace.steps.push_back(chunk_end - static_cast<int>(F - 1 - f));
      trace.latents.push_back(std::move(frame));
    }
    if (augment) {
      // Current-step conditioning latent only: the newest frame of the chunk.
      for (std::size_t v = 0; v < V; ++v) {
        for (double& x : chunk.obs.row((F - 1) * V + v)) {
          x += opts.latent_aug_sigma * rms * rng.normal();
        }
      }
    }
    // Newest act_len actions, drawing on the previous chunk when S is short.
    std::vector<double> history(ctx.back().actions.values());
    history.insert(history.end(), next.actions.values().begin(), next.actions.values().end());
    chunk.actions = Matrix(act_len, kActionDim);
    std::copy(history.end() - static_cast<std::ptrdiff_t>(chunk.actions.size()), history.end(),
              chunk.actions.values().begin());
    for (int j = 0; j < S; ++j) {
      const auto row = static_cast<std::size_t>(step * S + j);
      trace.actions(row, 0) = next.actions(static_cast<std::size_t>(j), 0);
      trace.actions(row, 1) = next.actions(static_cast<std::size_t>(j), 1);
      trace.action_steps.push_back(trace.state.current_step + j + 1);
    }
    trace.chunk_predictions.push_back(std::move(next));
    ctx.push_back(std::move(chunk));
    // Bound the stored context: the sink is kept separately.
    if (static_cast<int>(ctx.size()) > window) {
      ctx.erase(ctx.begin(), ctx.end() - window);
    }
    trace.state.current_step = chunk_end;
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kCheckpointMagic[] = "FSCK";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(std::ostream& out, const Model& model) {
  nlohmann::json header;
  header["config"] = model.config();
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& p : model.params()) {
    shapes.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  }
  header["params"] = shapes;
  const std::string text = header.dump();
  binio::put_magic(out, kCheckpointMagic);
  binio::put_u32(out, kCheckpointVersion);
  binio::put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto flat = model.flat_parameters();
  binio::put_u64(out, flat.size());
  binio::put_f64s(out, flat);
  if (!out) {
    throw RuntimeFailure("save_checkpoint: write failed");
  }
}

Model load_checkpoint(std::istream& in) {
  binio::expect_magic(in, kCheckpointMagic, "checkpoint");
  const auto version = binio::get_u32(in);
  if (version != kCheckpointVersion) {
    throw RuntimeFailure("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto len = binio::get_u64(in);
  if (len > (1u << 24)) {
    throw RuntimeFailure("checkpoint: header too large");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) {
    throw RuntimeFailure("checkpoint: truncated header");
  }
  const auto header = nlohmann::json::parse(text);
  Model model(header.at("config").get<ModelConfig>());
  const auto& shapes = header.at("params");
  if (shapes.size() != model.params().size()) {
    throw RuntimeFailure("checkpoint: parameter list does not match the configuration");
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& p = model.params()[i];
    if (shapes[i].at("name").get<std::string>() != p.name || shapes[i].at("rows").get<std::size_t>() != p.value.rows() ||
        shapes[i].at("cols").get<std::size_t>() != p.value.cols()) {
      throw RuntimeFailure("checkpoint: parameter '" + p.name + "' has a different shape");
    }
  }
  const auto count = binio::get_u64(in);
  if (count != model.parameter_count()) {
    throw RuntimeFailure("checkpoint: expected " + std::to_string(model.parameter_count()) + " parameters, found " +
                         std::to_string(count));
  }
  std::vector<double> flat(count);
  binio::get_f64s(in, flat);
  model.set_flat_parameters(flat);
  return model;
}

}  // namespace foresight
