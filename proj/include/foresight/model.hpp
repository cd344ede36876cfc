#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "foresight/attention.hpp"
#include "foresight/chunk_layout.hpp"
#include "foresight/curriculum.hpp"
#include "foresight/matrix.hpp"
#include "foresight/objectives.hpp"
#include "foresight/sparse_mask.hpp"
#include "foresight/synth_world.hpp"

namespace foresight {

namespace ad {
struct AttentionPlan;
}

constexpr int kActionDim = 2;

// Desk-scale prompt: one OBS token per frame and view, four tokens per block,
// so every segment fills whole blocks.
LayoutConfig default_model_layout();

struct ModelConfig {
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 2;
  int ff_dim = 64;
  LayoutConfig layout = default_model_layout();
  MaskConfig mask{};
  int latent_dim = 16;
  int bev_dim = 16;
  // Action rows per chunk transition available from the head (3 s at 4 Hz).
  int max_action_steps = 12;
  int max_chunks = 8;
  // Std of the output-head weights relative to 1/sqrt(d_model).
  double head_init_scale = 0.1;
  std::uint64_t seed = 1;

  int token_dim() const { return latent_dim / layout.tokens_per_frame_per_view; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Param {
  std::string name;
  Matrix value;
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(const Model& other);
  Model& operator=(const Model& other);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  const Matrix& param(const std::string& name) const;
  Matrix& param(const std::string& name);
  std::size_t parameter_count() const;

  std::vector<double> flat_parameters() const;
  void set_flat_parameters(std::span<const double> flat);

  // Zeroes every output head, including the residual skips.
  void zero_output_adapters();

  // Grid and block-sparse attention plan for a prompt of n_chunks, cached.
  struct Structure {
    PromptLayout layout;
    BlockGrid grid;
    std::vector<BlockMask> masks;
    std::shared_ptr<const ad::AttentionPlan> plan;
  };
  std::shared_ptr<const Structure> structure(int n_chunks) const;

 private:
  ModelConfig cfg_;
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
  mutable std::mutex cache_mutex_;
  mutable std::map<int, std::shared_ptr<const Structure>> cache_;
};

// Deterministic initialization from cfg.seed. Throws ConfigError for an odd
// head count.
Model init_model(const ModelConfig& cfg);

// Output heads set to the identity dynamics: OBS predictions copy the input
// frames, action predictions repeat the chunk's last action, BEV is zero.
Model make_copy_last_chunk_model(const ModelConfig& cfg);

struct ChunkInput {
  Matrix obs;      // (frames * n_views) x latent_dim, row f * n_views + v, f = 0 oldest
  Matrix actions;  // action_len x 2, oldest first
  double stride_s = 1.0;
};

struct Prompt {
  std::vector<ChunkInput> chunks;
};

// OBS outputs of chunk i predict the frames of chunk i + 1; the query tokens
// of chunk i predict the actions and BEV latent of that transition.
struct Predictions {
  Matrix obs;      // (n_chunks * frames * n_views) x latent_dim
  Matrix actions;  // (n_chunks * steps_per_stride) x 2
  Matrix bev;      // n_chunks x bev_dim
};

Predictions forward(const Model& model, const Prompt& prompt);
// Explicit masks: one per head group, over `grid`, which must be the model's
// grid for this prompt length.
Predictions forward(const Model& model, const Prompt& prompt, const BlockGrid& grid,
                    const std::vector<BlockMask>& masks);
// Dense reference path using token-level masks.
Predictions forward_dense(const Model& model, const Prompt& prompt, const std::vector<TokenMask>& masks);

struct TrainingSample {
  std::string id;
  Prompt prompt;
  Matrix obs_target;     // rows as Predictions::obs
  Matrix action_target;  // rows as Predictions::actions
  Matrix bev_target;     // rows as Predictions::bev
};

// Ground-truth OBS/ACT inputs for the chunk ending at `step`.
ChunkInput chunk_from_episode(const Episode& ep, int step, const ModelConfig& cfg, double stride_s);

// Earliest anchor with a full chunk of frames and actions behind it.
int min_anchor_step(const ModelConfig& cfg);
// Latest anchor leaving room for the stage's horizon.
int max_anchor_step(const Episode& ep, const CurriculumStage& stage);

// Teacher-forced sample: chunk 0 holds the context at the anchor, chunks
// 1..H-1 hold the ground truth of targets 1..H-1.
TrainingSample make_training_sample(const Episode& ep, int anchor_step, const CurriculumStage& stage,
                                    const ModelConfig& cfg, std::string id = {});

// Loss of one sample; when grads is non-null it receives d(total)/d(param),
// one matrix per parameter (accumulated).
LossBreakdown sample_loss(const Model& model, const TrainingSample& sample, const LossWeights& w,
                          std::vector<Matrix>* grads = nullptr);

std::vector<double> flat_gradient(const Model& model, const TrainingSample& sample, const LossWeights& w);

struct Optimizer {
  double momentum = 0.9;
  double clip_norm = 1.0;  // global gradient norm; 0 disables clipping
  std::vector<Matrix> velocity;
};

// One SGD-with-momentum step on the batch mean of total_loss. Throws
// RuntimeFailure naming the sample when a loss is not finite.
LossBreakdown train_step(Model& model, Optimizer& opt, const std::vector<TrainingSample>& batch,
                         const LossWeights& w, double lr);

struct RolloutOptions {
  double horizon_s = 6.0;
  double stride_s = 1.0;
  bool use_latent_sink = true;
  double latent_aug_sigma = 0.05;  // relative to the context latent RMS
  bool training_mode = false;
  int window_chunks = 0;  // 0: the model's max_chunks
  int frame_dim = 64;
  std::uint64_t seed = 0;
};

struct RolloutState {
  std::vector<ChunkInput> context;
  ChunkInput latent_sink;
  int current_step = 0;
};

struct RolloutTrace {
  std::vector<int> steps;        // episode step of every rolled-out frame
  std::vector<Matrix> latents;   // per frame: n_views x latent_dim
  std::vector<int> action_steps;
  Matrix actions;                // one row per control step
  std::vector<Predictions> chunk_predictions;  // next-chunk predictions per rollout step
  RolloutState state;
};

// Rolls the model forward one chunk per stride, decoding every predicted
// latent, re-encoding it and appending it to the context. `start_step` is the
// episode step at which the last context chunk ends.
RolloutTrace closed_loop_rollout(const Model& model, const std::vector<ChunkInput>& initial_context, int start_step,
                                 const RolloutOptions& opts);

// "FSCK", u32 version, u64 header length, JSON header (config and parameter
// shapes), u64 count, f64 parameters.
void save_checkpoint(std::ostream& out, const Model& model);
Model load_checkpoint(std::istream& in);

}  // namespace foresight
