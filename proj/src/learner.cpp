#include "hyperfed/learner.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace hyperfed {

namespace {

using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

struct LayerShape {
  int in;
  int out;
  std::int64_t w_offset;
  std::int64_t b_offset;
};

std::vector<LayerShape> layer_shapes(const ExtractorConfig& cfg) {
  if (cfg.input_dim < 1 || cfg.output_dim < 1) {
    throw std::invalid_argument("extractor: input and output dimensions must be positive");
  }
  std::vector<int> widths{cfg.input_dim};
  for (int h : cfg.hidden) {
    if (h < 1) throw std::invalid_argument("extractor: hidden widths must be positive");
    widths.push_back(h);
  }
  widths.push_back(cfg.output_dim);
  std::vector<LayerShape> shapes;
  std::int64_t offset = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    LayerShape s{widths[l], widths[l + 1], offset, 0};
    offset += static_cast<std::int64_t>(s.in) * s.out;
    s.b_offset = offset;
    offset += s.out;
    shapes.push_back(s);
  }
  return shapes;
}

void check_theta(const ParamVector& theta, const ExtractorConfig& cfg) {
  if (theta.layout() != extractor_layout(cfg)) {
    throw std::invalid_argument("extractor: parameter layout does not match the extractor config");
  }
}

Eigen::MatrixXd activate(const Eigen::MatrixXd& h, Activation a) {
  switch (a) {
    case Activation::kTanh:
      return h.array().tanh().matrix();
    case Activation::kRelu:
      return h.cwiseMax(0.0);
    case Activation::kIdentity:
      return h;
  }
  return h;
}

// d activation / d h expressed through h and the activation output.
Eigen::MatrixXd activation_slope(const Eigen::MatrixXd& h, const Eigen::MatrixXd& out, Activation a) {
  switch (a) {
    case Activation::kTanh:
      return (1.0 - out.array().square()).matrix();
    case Activation::kRelu:
      return (h.array() > 0.0).cast<double>().matrix();
    case Activation::kIdentity:
      return Eigen::MatrixXd::Ones(h.rows(), h.cols());
  }
  return Eigen::MatrixXd::Ones(h.rows(), h.cols());
}

struct ForwardPass {
  std::vector<Eigen::MatrixXd> inputs;  // input to each layer
  std::vector<Eigen::MatrixXd> pre;     // pre-activation of each layer
  Eigen::MatrixXd output;
};

ForwardPass forward(const ParamVector& theta, const ExtractorConfig& cfg, const FeatureMatrix& x) {
  if (x.cols() != cfg.input_dim) {
    throw std::invalid_argument("extract: expected " + std::to_string(cfg.input_dim) +
                                " features, got " + std::to_string(x.cols()));
  }
  const auto shapes = layer_shapes(cfg);
  ForwardPass fp;
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto& s = shapes[l];
    ConstRowMap w(theta.values().data() + s.w_offset, s.out, s.in);
    Eigen::Map<const Eigen::RowVectorXd> b(theta.values().data() + s.b_offset, s.out);
    Eigen::MatrixXd h = a * w.transpose();
    h.rowwise() += b;
    fp.inputs.push_back(std::move(a));
    a = (l + 1 < shapes.size()) ? activate(h, cfg.activation) : h;
    fp.pre.push_back(std::move(h));
  }
  fp.output = std::move(a);
  return fp;
}

DistanceGradient<double> distance_grad(const TangentVector<double>& z, const BallPoint<double>& w,
                                       Metric metric) {
  return metric == Metric::kGeodesic ? geodesic_distance_grad(z, w) : euclidean_distance_grad(z, w);
}

double distance(const BallPoint<double>& x, const BallPoint<double>& w, Metric metric) {
  return metric == Metric::kGeodesic ? geodesic_distance(x, w) : euclidean_distance(x, w);
}

void check_labels(std::span<const int> labels, const PrototypeSet& protos) {
  for (int y : labels) {
    if (y < 0 || y >= protos.classes()) {
      throw std::invalid_argument("triplet: label " + std::to_string(y) + " outside the prototype set");
    }
  }
}

}  // namespace

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  if (name == "identity" || name == "linear") return Activation::kIdentity;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kTanh:
      return "tanh";
    case Activation::kRelu:
      return "relu";
    case Activation::kIdentity:
      return "identity";
  }
  return "tanh";
}

Metric parse_metric(const std::string& name) {
  if (name == "geodesic") return Metric::kGeodesic;
  if (name == "euclidean") return Metric::kEuclidean;
  throw std::invalid_argument("unknown metric '" + name + "'");
}

std::string to_string(Metric m) { return m == Metric::kGeodesic ? "geodesic" : "euclidean"; }

Layout extractor_layout(const ExtractorConfig& cfg) {
  Layout layout;
  const auto shapes = layer_shapes(cfg);
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    layout.push_back({"W" + std::to_string(l), {shapes[l].out, shapes[l].in}});
    layout.push_back({"b" + std::to_string(l), {shapes[l].out}});
  }
  return layout;
}

ExtractorConfig extractor_config_from_layout(const Layout& layout, Activation activation) {
  if (layout.empty() || layout.size() % 2 != 0) {
    throw std::invalid_argument("checkpoint layout is not an extractor (expected W/b pairs)");
  }
  ExtractorConfig cfg;
  cfg.activation = activation;
  cfg.hidden.clear();
  const std::size_t layers = layout.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& w = layout[2 * l];
    if (w.dims.size() != 2) throw std::invalid_argument("checkpoint tensor " + w.name + " is not a matrix");
    if (l == 0) cfg.input_dim = static_cast<int>(w.dims[1]);
    if (l + 1 < layers) {
      cfg.hidden.push_back(static_cast<int>(w.dims[0]));
    } else {
      cfg.output_dim = static_cast<int>(w.dims[0]);
    }
  }
  if (extractor_layout(cfg) != layout) {
    throw std::invalid_argument("checkpoint layout is not a consistent extractor");
  }
  return cfg;
}

ParamVector init_extractor(const ExtractorConfig& cfg) {
  ParamVector theta(extractor_layout(cfg));
  Rng rng(cfg.init_seed);
  for (const auto& s : layer_shapes(cfg)) {
    const double limit = std::sqrt(6.0 / (s.in + s.out));
    std::uniform_real_distribution<double> uni(-limit, limit);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.in) * s.out; ++i) {
      theta.values()[s.w_offset + i] = uni(rng);
    }
  }
  return theta;
}

Eigen::MatrixXd extract_batch(const ParamVector& theta, const ExtractorConfig& cfg, const FeatureMatrix& x) {
  check_theta(theta, cfg);
  return forward(theta, cfg, x).output;
}

TangentVector<double> extract(const ParamVector& theta, const ExtractorConfig& cfg,
                              const Eigen::VectorXd& x) {
  FeatureMatrix row = x.transpose();
  return TangentVector<double>(Eigen::VectorXd(extract_batch(theta, cfg, row).row(0).transpose()));
}

double triplet_loss(const TangentVector<double>& z, int y, const PrototypeSet& protos, int neg,
                    double margin, Metric metric) {
  if (y == neg) throw std::invalid_argument("triplet_loss: negative class equals the label");
  if (y < 0 || neg < 0 || y >= protos.classes() || neg >= protos.classes()) {
    throw std::invalid_argument("triplet_loss: class index out of range");
  }
  const BallPoint<double> x = exp_map_origin(z);
  const double d_pos = distance(x, protos.point(y), metric);
  const double d_neg = distance(x, protos.point(neg), metric);
  return std::max(d_pos - d_neg + margin, 0.0);
}

int sample_negative(int y, int classes, Rng& rng) {
  if (classes < 2) throw std::invalid_argument("sample_negative: need at least 2 classes");
  const int draw = std::uniform_int_distribution<int>(0, classes - 2)(rng);
  return draw >= y ? draw + 1 : draw;
}

TripletGradient triplet_grad(const ParamVector& theta, const ExtractorConfig& cfg,
                             const FeatureMatrix& x, std::span<const int> labels,
                             const Eigen::MatrixXi& negatives, const PrototypeSet& protos,
                             double margin, Metric metric) {
  check_theta(theta, cfg);
  const auto batch = static_cast<Eigen::Index>(labels.size());
  if (batch == 0 || x.rows() != batch) throw std::invalid_argument("triplet_grad: empty or ragged batch");
  if (negatives.rows() != batch || negatives.cols() < 1) {
    throw std::invalid_argument("triplet_grad: negatives must be B x (>= 1)");
  }
  if (protos.dim() != cfg.output_dim) {
    throw std::invalid_argument("triplet_grad: prototype dimension differs from extractor output");
  }
  check_labels(labels, protos);

  const ForwardPass fp = forward(theta, cfg, x);
  const Eigen::Index negs = negatives.cols();
  const double inv_negs = 1.0 / static_cast<double>(negs);

  TripletGradient out;
  out.grad = ParamVector::zeros_like(theta);
  Eigen::MatrixXd dz = Eigen::MatrixXd::Zero(batch, cfg.output_dim);
  bool any_active = false;
  for (Eigen::Index i = 0; i < batch; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const TangentVector<double> z(Eigen::VectorXd(fp.output.row(i).transpose()));
    const auto pos = distance_grad(z, protos.point(y), metric);
    for (Eigen::Index j = 0; j < negs; ++j) {
      const int neg = negatives(i, j);
      if (neg == y || neg < 0 || neg >= protos.classes()) {
        throw std::invalid_argument("triplet_grad: invalid negative class for sample " + std::to_string(i));
      }
      const auto ng = distance_grad(z, protos.point(neg), metric);
      const double hinge = pos.distance - ng.distance + margin;
      if (hinge <= 0.0) continue;
      any_active = true;
      out.loss += hinge * inv_negs;
      dz.row(i) += inv_negs * (pos.grad.coords() - ng.grad.coords()).transpose();
      if (pos.degenerate || ng.degenerate) ++out.degenerate;
    }
  }
  out.loss /= static_cast<double>(batch);
  if (!any_active) return out;
  dz /= static_cast<double>(batch);

  const auto shapes = layer_shapes(cfg);
  Eigen::MatrixXd g = std::move(dz);
  for (std::size_t l = shapes.size(); l-- > 0;) {
    const auto& s = shapes[l];
    if (l + 1 < shapes.size()) {
      // fp.inputs[l + 1] is this layer's activation output
      g = g.cwiseProduct(activation_slope(fp.pre[l], fp.inputs[l + 1], cfg.activation));
    }
    RowMap dw(out.grad.values().data() + s.w_offset, s.out, s.in);
    dw = g.transpose() * fp.inputs[l];
    Eigen::Map<Eigen::RowVectorXd> db(out.grad.values().data() + s.b_offset, s.out);
    db = g.colwise().sum();
    if (l > 0) {
      ConstRowMap w(theta.values().data() + s.w_offset, s.out, s.in);
      g = g * w;
    }
  }
  return out;
}

TripletGradient triplet_grad(const ParamVector& theta, const ExtractorConfig& cfg,
                             const FeatureMatrix& x, std::span<const int> labels,
                             const PrototypeSet& protos, const TripletConfig& tcfg, Rng& rng) {
  if (tcfg.negatives_per_sample < 1) throw std::invalid_argument("triplet: negatives_per_sample must be >= 1");
  Eigen::MatrixXi negatives(static_cast<Eigen::Index>(labels.size()), tcfg.negatives_per_sample);
  for (Eigen::Index i = 0; i < negatives.rows(); ++i)
    for (Eigen::Index j = 0; j < negatives.cols(); ++j)
      negatives(i, j) = sample_negative(labels[static_cast<std::size_t>(i)], protos.classes(), rng);
  return triplet_grad(theta, cfg, x, labels, negatives, protos, tcfg.margin, tcfg.metric);
}

LocalTrainResult local_train(const ParamVector& theta_in, const LabeledDataset& train,
                             const PrototypeSet& protos, const ExtractorConfig& cfg,
                             const TripletConfig& tcfg, const LocalTrainConfig& tc, Rng& rng) {
  if (train.size() == 0) throw std::invalid_argument("local_train: empty training set");
  if (tc.batch_size < 1) throw std::invalid_argument("local_train: batch size must be positive");
  if (!(tcfg.margin > 0.0)) throw std::invalid_argument("local_train: margin must be positive");

  LocalTrainResult result{theta_in, {}};
  const std::int64_t n = train.size();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::int64_t{0});

  const bool step_mode = tc.steps >= 0;
  std::int64_t steps_left = step_mode ? tc.steps : 0;
  const int epochs = step_mode ? -1 : tc.epochs;

  for (int epoch = 0; step_mode ? steps_left > 0 : epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::int64_t seen = 0;
    for (std::int64_t start = 0; start < n; start += tc.batch_size) {
      if (step_mode && steps_left == 0) break;
      const std::int64_t end = std::min<std::int64_t>(n, start + tc.batch_size);
      std::vector<std::int64_t> idx(order.begin() + start, order.begin() + end);
      const LabeledDataset batch = train.subset(idx);
      const auto tg = triplet_grad(result.theta, cfg, batch.features, batch.labels, protos, tcfg, rng);
      if (tc.lr != 0.0) result.theta.values() -= tc.lr * tg.grad.values();
      loss_sum += tg.loss * static_cast<double>(end - start);
      seen += end - start;
      if (step_mode) --steps_left;
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(seen));
  }
  return result;
}

double dataset_loss(const ParamVector& theta, const ExtractorConfig& cfg, const LabeledDataset& data,
                    const PrototypeSet& protos, const TripletConfig& tcfg, Rng& rng) {
  if (data.size() == 0) return 0.0;
  const Eigen::MatrixXd z = extract_batch(theta, cfg, data.features);
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int y = data.labels[static_cast<std::size_t>(i)];
    const TangentVector<double> t(Eigen::VectorXd(z.row(i).transpose()));
    double sample = 0.0;
    for (int j = 0; j < tcfg.negatives_per_sample; ++j) {
      sample += triplet_loss(t, y, protos, sample_negative(y, protos.classes(), rng), tcfg.margin, tcfg.metric);
    }
    total += sample / tcfg.negatives_per_sample;
  }
  return total / static_cast<double>(z.rows());
}

std::vector<int> predict_batch(const ParamVector& theta, const ExtractorConfig& cfg,
                               const PrototypeSet& protos, const FeatureMatrix& x, Metric metric) {
  if (protos.dim() != cfg.output_dim) {
    throw std::invalid_argument("predict: prototype dimension differs from extractor output");
  }
  const Eigen::MatrixXd z = extract_batch(theta, cfg, x);
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const BallPoint<double> p = exp_map_origin(TangentVector<double>(Eigen::VectorXd(z.row(i).transpose())));
    int best = 0;
    double best_d = distance(p, protos.point(0), metric);
    for (int c = 1; c < protos.classes(); ++c) {
      const double d = distance(p, protos.point(c), metric);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

int predict(const ParamVector& theta, const ExtractorConfig& cfg, const PrototypeSet& protos,
            const Eigen::VectorXd& x, Metric metric) {
  FeatureMatrix row = x.transpose();
  return predict_batch(theta, cfg, protos, row, metric).front();
}

double accuracy(const ParamVector& theta, const ExtractorConfig& cfg, const PrototypeSet& protos,
                const LabeledDataset& data, Metric metric) {
  if (data.size() == 0) return 0.0;
  const auto pred = predict_batch(theta, cfg, protos, data.features, metric);
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace hyperfed
