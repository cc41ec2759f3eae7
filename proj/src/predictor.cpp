#include "chanpred/predictor.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

#include "chanpred/rng.hpp"
#include "container_io.hpp"

namespace chanpred {

namespace {

constexpr std::uint64_t kInitSalt = 0x1417;

struct TensorSpec {
  std::string name;
  Shape shape;
  Index fan_in;  // 0 marks a bias (initialized to zero, no draws)
};

std::vector<TensorSpec> tensor_specs(Backbone backbone, const PredictorDims& dims) {
  const Index in = dims.input, hid = dims.hidden, out = dims.output, t = dims.history;
  std::vector<TensorSpec> specs;
  if (backbone == Backbone::kLinear) {
    specs.push_back({"w", Shape{t * in, out}, t * in});
    specs.push_back({"b", Shape{out}, 0});
    return specs;
  }
  const std::vector<std::string> gates =
      backbone == Backbone::kGru ? std::vector<std::string>{"z", "r", "n"}
                                 : std::vector<std::string>{"i", "f", "g", "o"};
  for (const auto& g : gates) {
    specs.push_back({g + ".w", Shape{in, hid}, in});
    specs.push_back({g + ".u", Shape{hid, hid}, hid});
    specs.push_back({g + ".b", Shape{hid}, 0});
  }
  specs.push_back({"head.w", Shape{hid, out}, hid});
  specs.push_back({"head.b", Shape{out}, 0});
  return specs;
}

Tensor affine(const Tensor& x, const Tensor& h, const Tensor& w, const Tensor& u,
              const Tensor& b) {
  return add_rowvec(matmul(x, w) + matmul(h, u), b);
}

}  // namespace

std::string backbone_name(Backbone backbone) {
  switch (backbone) {
    case Backbone::kLinear: return "linear";
    case Backbone::kGru: return "gru";
    case Backbone::kLstm: return "lstm";
  }
  throw std::invalid_argument("backbone_name: invalid enum value");
}

Backbone backbone_from_name(const std::string& name) {
  if (name == "linear") return Backbone::kLinear;
  if (name == "gru") return Backbone::kGru;
  if (name == "lstm") return Backbone::kLstm;
  throw std::invalid_argument("unknown backbone: " + name +
                              " (expected linear, gru or lstm)");
}

Predictor Predictor::init(Backbone backbone, PredictorDims dims, std::uint64_t seed) {
  if (dims.input < 1 || dims.hidden < 1 || dims.output < 1 || dims.history < 1) {
    throw std::invalid_argument("Predictor::init: all dims must be >= 1");
  }
  Predictor p;
  p.backbone_ = backbone;
  p.dims_ = dims;

  Rng rng(Rng::derive(seed, {kInitSalt}));
  Index offset = 0;
  for (const auto& spec : tensor_specs(backbone, dims)) {
    const Index length = shape_size(spec.shape);
    ArrayXd values = ArrayXd::Zero(length);
    if (spec.fan_in > 0) {
      const double s = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (Index i = 0; i < length; ++i) values(i) = rng.uniform(-s, s);
    }
    p.layout_.push_back({spec.name, offset, length});
    p.params_.push_back(Tensor::parameter(spec.shape, std::move(values)));
    offset += length;
  }
  p.m_ = offset;
  return p;
}

Tensor& Predictor::param(const std::string& name) {
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (layout_[i].name == name) return params_[i];
  }
  throw std::invalid_argument("Predictor::param: no tensor named " + name);
}

const Tensor& Predictor::named(const std::string& name) const {
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (layout_[i].name == name) return params_[i];
  }
  throw std::invalid_argument("Predictor: no tensor named " + name);
}

ArrayXd Predictor::flatten_params() const {
  ArrayXd flat(m_);
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    flat.segment(layout_[i].offset, layout_[i].length) = params_[i].values();
  }
  return flat;
}

void Predictor::unflatten_params(const ArrayXd& flat) {
  if (flat.size() != m_) {
    throw std::invalid_argument("unflatten_params: expected " + std::to_string(m_) +
                                " values, got " + std::to_string(flat.size()));
  }
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    params_[i].values() = flat.segment(layout_[i].offset, layout_[i].length);
  }
}

ArrayXd Predictor::flatten_grads() const {
  ArrayXd flat = ArrayXd::Zero(m_);
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (params_[i].has_grad()) {
      flat.segment(layout_[i].offset, layout_[i].length) = params_[i].grad();
    }
  }
  return flat;
}

void Predictor::clear_grads() {
  for (auto& p : params_) p.clear_grad();
}

Predictor Predictor::clone() const {
  Predictor copy;
  copy.backbone_ = backbone_;
  copy.dims_ = dims_;
  copy.layout_ = layout_;
  copy.m_ = m_;
  copy.params_.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    copy.params_.push_back(Tensor::parameter(params_[i].shape(), params_[i].values()));
  }
  return copy;
}

Tensor Predictor::step_gru(const Tensor& x, const Tensor& h) const {
  const Tensor z = sigmoid(affine(x, h, named("z.w"), named("z.u"), named("z.b")));
  const Tensor r = sigmoid(affine(x, h, named("r.w"), named("r.u"), named("r.b")));
  const Tensor n = tanh(affine(x, mul(r, h), named("n.w"), named("n.u"), named("n.b")));
  const Tensor keep = add_scalar(mul_scalar(z, -1.0), 1.0);  // 1 - z
  return mul(keep, n) + mul(z, h);
}

void Predictor::step_lstm(const Tensor& x, Tensor& h, Tensor& c) const {
  const Tensor i = sigmoid(affine(x, h, named("i.w"), named("i.u"), named("i.b")));
  const Tensor f = sigmoid(affine(x, h, named("f.w"), named("f.u"), named("f.b")));
  const Tensor g = tanh(affine(x, h, named("g.w"), named("g.u"), named("g.b")));
  const Tensor o = sigmoid(affine(x, h, named("o.w"), named("o.u"), named("o.b")));
  c = mul(f, c) + mul(i, g);
  h = mul(o, tanh(c));
}

Tensor Predictor::forward(const std::vector<Tensor>& frames) const {
  if (static_cast<int>(frames.size()) != dims_.history) {
    throw std::invalid_argument("Predictor::forward: expected " +
                                std::to_string(dims_.history) + " frames, got " +
                                std::to_string(frames.size()));
  }
  const Index batch = frames[0].dim(0);
  for (const Tensor& f : frames) {
    if (f.rank() != 2 || f.dim(0) != batch || f.dim(1) != dims_.input) {
      throw std::invalid_argument("Predictor::forward: every frame must be [batch, " +
                                  std::to_string(dims_.input) + "], got " +
                                  shape_to_string(f.shape()));
    }
  }

  if (backbone_ == Backbone::kLinear) {
    const Tensor window = concat(frames, 1);  // [batch, T * input]
    return add_rowvec(matmul(window, named("w")), named("b"));
  }

  Tensor h = Tensor::zeros(Shape{batch, dims_.hidden});
  if (backbone_ == Backbone::kGru) {
    for (const Tensor& x : frames) h = step_gru(x, h);
  } else {
    Tensor c = Tensor::zeros(Shape{batch, dims_.hidden});
    for (const Tensor& x : frames) step_lstm(x, h, c);
  }
  return add_rowvec(matmul(h, named("head.w")), named("head.b"));
}

Tensor Predictor::predict(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(0) != 2) {
    throw std::invalid_argument("Predictor::predict: expected [2, T, n_tx, n_rx], got " +
                                shape_to_string(x.shape()));
  }
  const Index t_len = x.dim(1), n_tx = x.dim(2), n_rx = x.dim(3);
  const Index frame = n_tx * n_rx;
  if (t_len != dims_.history || 2 * frame != dims_.input) {
    throw std::invalid_argument("Predictor::predict: window " + shape_to_string(x.shape()) +
                                " does not match dims (T=" + std::to_string(dims_.history) +
                                ", input=" + std::to_string(dims_.input) + ")");
  }
  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(t_len));
  for (Index t = 0; t < t_len; ++t) {
    ArrayXd row(2 * frame);
    row.segment(0, frame) = x.values().segment(t * frame, frame);
    row.segment(frame, frame) = x.values().segment(t_len * frame + t * frame, frame);
    frames.push_back(Tensor(Shape{1, 2 * frame}, std::move(row)));
  }
  const Tensor y = forward(frames);
  return Tensor(Shape{2, n_tx, n_rx}, y.values());
}

std::vector<Tensor> pack_frames(const TaskDataset& dataset,
                                const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("pack_frames: empty index list");
  const Index t_len = dataset.history;
  const Index frame = static_cast<Index>(dataset.scenario.n_tx) * dataset.scenario.n_rx;
  const Index width = 2 * frame;
  const Index batch = static_cast<Index>(indices.size());

  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(t_len));
  for (Index t = 0; t < t_len; ++t) {
    ArrayXd buf(batch * width);
    for (Index b = 0; b < batch; ++b) {
      const ArrayXd& x = dataset.samples.at(indices[static_cast<std::size_t>(b)]).x.values();
      buf.segment(b * width, frame) = x.segment(t * frame, frame);
      buf.segment(b * width + frame, frame) = x.segment(t_len * frame + t * frame, frame);
    }
    frames.push_back(Tensor(Shape{batch, width}, std::move(buf)));
  }
  return frames;
}

Tensor pack_targets(const TaskDataset& dataset, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("pack_targets: empty index list");
  const Index width = 2 * static_cast<Index>(dataset.scenario.n_tx) * dataset.scenario.n_rx;
  const Index batch = static_cast<Index>(indices.size());
  ArrayXd buf(batch * width);
  for (Index b = 0; b < batch; ++b) {
    buf.segment(b * width, width) =
        dataset.samples.at(indices[static_cast<std::size_t>(b)]).h.values();
  }
  return Tensor(Shape{batch, width}, std::move(buf));
}

Tensor nmse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.rank() != 2 || target.rank() != 2 || pred.shape() != target.shape()) {
    throw std::invalid_argument("nmse_loss: expected matching [batch, n] tensors, got " +
                                shape_to_string(pred.shape()) + " and " +
                                shape_to_string(target.shape()));
  }
  const Index batch = target.dim(0), width = target.dim(1);
  ArrayXd weights(batch * width);
  for (Index b = 0; b < batch; ++b) {
    const double norm_sq = target.values().segment(b * width, width).square().sum();
    if (norm_sq <= 0.0) {
      throw std::invalid_argument("nmse_loss: zero-norm target in batch row " +
                                  std::to_string(b));
    }
    weights.segment(b * width, width).setConstant(1.0 / (static_cast<double>(batch) * norm_sq));
  }
  const Tensor w(target.shape(), std::move(weights));
  return sum(mul(square(sub(target, pred)), w));
}

double nmse(const Tensor& pred, const Tensor& target) {
  if (pred.rank() != 2 || target.rank() != 2 || pred.shape() != target.shape()) {
    throw std::invalid_argument("nmse: expected matching [batch, n] tensors, got " +
                                shape_to_string(pred.shape()) + " and " +
                                shape_to_string(target.shape()));
  }
  const Index batch = target.dim(0), width = target.dim(1);
  double acc = 0.0;
  for (Index b = 0; b < batch; ++b) {
    const double norm_sq = target.values().segment(b * width, width).square().sum();
    if (norm_sq <= 0.0) {
      throw std::invalid_argument("nmse: zero-norm target in batch row " + std::to_string(b));
    }
    const double err_sq =
        (target.values().segment(b * width, width) - pred.values().segment(b * width, width))
            .square()
            .sum();
    acc += err_sq / norm_sq;
  }
  return acc / static_cast<double>(batch);
}

double nmse_db(double nmse_linear) { return 10.0 * std::log10(nmse_linear); }

void save_checkpoint(const Predictor& p, const std::string& path) {
  detail::json header;
  header["format"] = "chanpred-checkpoint";
  header["version"] = 1;
  header["backbone"] = backbone_name(p.backbone());
  header["dims"] = {{"input", p.dims().input},
                    {"hidden", p.dims().hidden},
                    {"output", p.dims().output},
                    {"history", p.dims().history}};
  header["m"] = p.param_count();
  const ArrayXd flat = p.flatten_params();
  detail::write_container(path, "CPCK1", header,
                          std::span<const double>(flat.data(), static_cast<std::size_t>(flat.size())));
}

Predictor load_checkpoint(const std::string& path) {
  const auto c = detail::read_container(path, "CPCK1");
  PredictorDims dims;
  dims.input = c.header.at("dims").at("input").get<int>();
  dims.hidden = c.header.at("dims").at("hidden").get<int>();
  dims.output = c.header.at("dims").at("output").get<int>();
  dims.history = c.header.at("dims").at("history").get<int>();
  Predictor p = Predictor::init(backbone_from_name(c.header.at("backbone").get<std::string>()),
                                dims, /*seed=*/0);
  const auto m = c.header.at("m").get<Index>();
  if (m != p.param_count() || static_cast<Index>(c.payload.size()) != p.param_count()) {
    throw std::runtime_error("checkpoint parameter count mismatch in " + path + ": header " +
                             std::to_string(m) + ", payload " +
                             std::to_string(c.payload.size()) + ", layout " +
                             std::to_string(p.param_count()));
  }
  p.unflatten_params(Eigen::Map<const ArrayXd>(c.payload.data(), m));
  return p;
}

}  // namespace chanpred
