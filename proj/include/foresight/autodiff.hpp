#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "foresight/attention.hpp"
#include "foresight/matrix.hpp"

namespace foresight::ad {

// Visibility for the multi-head attention op. Heads are split evenly across
// mask groups: head h uses group (h * n_groups) / n_heads. The forward pass
// runs either the block-sparse executor (block masks) or the dense reference
// (token masks); the backward pass recomputes probabilities over each query's
// visible key list.
struct AttentionPlan {
  int n_heads = 2;
  const BlockGrid* grid = nullptr;
  std::vector<BlockMask> block_masks;
  std::vector<TokenMask> token_masks;
  bool use_token_masks = false;
  std::vector<std::vector<std::vector<std::uint32_t>>> keys;  // [group][query token]

  int n_groups() const;
  int group_of_head(int h) const { return (h * n_groups()) / n_heads; }
};

std::shared_ptr<AttentionPlan> make_block_plan(const BlockGrid& grid, std::vector<BlockMask> masks, int n_heads);
std::shared_ptr<AttentionPlan> make_token_plan(std::vector<TokenMask> masks, int n_heads);

enum class RowNorm : std::uint8_t { L1, L2, L2Squared };

using Var = std::size_t;

// Records a forward computation and runs reverse-mode accumulation over it.
// Only the operations used by the model are provided.
class Tape {
 public:
  Var constant(Matrix value);
  // Leaf whose gradient is added into *grad_sink by backward().
  Var parameter(const Matrix& value, Matrix* grad_sink);

  const Matrix& value(Var v) const { return nodes_[v].value; }
  const Matrix& grad(Var v) const { return nodes_[v].grad; }
  bool requires_grad(Var v) const { return nodes_[v].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(out)/d(out) = 1 for a 1x1 output.
  void backward(Var out);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var add_row(Var a, Var row);  // row is 1 x cols, broadcast over rows
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  Var gelu(Var x);               // tanh approximation
  Var gather_rows(Var x, std::vector<std::uint32_t> rows);  // duplicates allowed
  Var scatter_rows(Var x, std::vector<std::uint32_t> rows, std::size_t n_rows);
  Var reshape(Var x, std::size_t rows, std::size_t cols);
  Var slice_cols(Var x, std::size_t begin, std::size_t end);
  Var attention(Var q, Var k, Var v, std::shared_ptr<const AttentionPlan> plan);
  // sum over rows of norm(pred_r - target_r), divided by `divisor`. 1 x 1.
  Var row_norm_loss(Var pred, const Matrix& target, RowNorm norm, double divisor);
  Var weighted_sum(const std::vector<std::pair<Var, double>>& terms);  // of 1 x 1 values

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Matrix* grad_sink = nullptr;
    std::function<void(Tape&)> backward;
  };

  Var push(Matrix value, bool requires_grad, std::function<void(Tape&)> backward = {});
  Matrix& grad_of(Var v);

  std::vector<Node> nodes_;
};

// C += A * B (optionally with A or B transposed).
void gemm_acc(const Matrix& a, bool ta, const Matrix& b, bool tb, Matrix& c);

}  // namespace foresight::ad
