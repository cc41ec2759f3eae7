#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chanpred/channel.hpp"
#include "chanpred/tensor.hpp"

namespace chanpred {

enum class Backbone { kLinear, kGru, kLstm };

std::string backbone_name(Backbone backbone);
Backbone backbone_from_name(const std::string& name);  // throws on unknown name

struct PredictorDims {
  int input = 8;    // flattened frame width, 2 * n_tx * n_rx
  int hidden = 32;  // recurrent state width (ignored by the linear backbone)
  int output = 8;   // flattened prediction width, 2 * n_tx * n_rx
  int history = 8;  // frames per input window (T)
};

/// One named parameter tensor's range in the flat vector.
struct LayoutEntry {
  std::string name;
  Index offset = 0;
  Index length = 0;
};

/// Channel-prediction backbone mapping a T-frame history window to the next
/// snapshot. Parameters live in named tensors with a fixed flat layout that
/// depends only on (backbone, dims), so importance vectors indexed by the
/// flat space stay valid across checkpointing and cloning.
class Predictor {
 public:
  Predictor() = default;

  /// Weights ~ uniform(-s, s) with s = 1/sqrt(fan_in); biases exactly 0.
  /// Deterministic in seed.
  static Predictor init(Backbone backbone, PredictorDims dims, std::uint64_t seed);

  Backbone backbone() const { return backbone_; }
  const PredictorDims& dims() const { return dims_; }
  const std::vector<LayoutEntry>& layout() const { return layout_; }
  Index param_count() const { return m_; }  // M

  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Tensor>& params() { return params_; }
  Tensor& param(const std::string& name);  // throws on unknown name

  ArrayXd flatten_params() const;
  void unflatten_params(const ArrayXd& flat);  // throws on length != M
  /// Concatenated gradients in layout order; zeros for untouched tensors.
  ArrayXd flatten_grads() const;
  void clear_grads();

  /// Deep copy: fresh parameter storage, identical layout and values.
  Predictor clone() const;

  /// frames: T tensors of shape [batch, input] in time order. Returns
  /// [batch, output]. Differentiable end-to-end; records on the active graph.
  Tensor forward(const std::vector<Tensor>& frames) const;

  /// Single-sample convenience: x is [2, T, n_tx, n_rx], result is
  /// [2, n_tx, n_rx].
  Tensor predict(const Tensor& x) const;

 private:
  Backbone backbone_ = Backbone::kLinear;
  PredictorDims dims_;
  std::vector<LayoutEntry> layout_;
  std::vector<Tensor> params_;  // aligned with layout_
  Index m_ = 0;

  const Tensor& named(const std::string& name) const;
  Tensor step_gru(const Tensor& x, const Tensor& h) const;
  void step_lstm(const Tensor& x, Tensor& h, Tensor& c) const;
};

/// Batch views over dataset samples. Frame t of sample indices[b] lands in
/// row b of the t-th returned tensor ([batch, 2*n_tx*n_rx], real plane of
/// the frame followed by its imaginary plane).
std::vector<Tensor> pack_frames(const TaskDataset& dataset,
                                const std::vector<std::size_t>& indices);
Tensor pack_targets(const TaskDataset& dataset, const std::vector<std::size_t>& indices);

/// Batch-mean normalized squared error, recorded on the active graph:
/// mean_b ||target_b - pred_b||^2 / ||target_b||^2 over rows of [batch, n].
/// Throws on a zero-norm target row.
Tensor nmse_loss(const Tensor& pred, const Tensor& target);

/// Same quantity without graph recording (evaluation path).
double nmse(const Tensor& pred, const Tensor& target);

double nmse_db(double nmse_linear);

void save_checkpoint(const Predictor& p, const std::string& path);
Predictor load_checkpoint(const std::string& path);

}  // namespace chanpred
