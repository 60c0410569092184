#pragma once

// Client loss functions.
//
// Two kinds exist. Quadratics carry exact constants (optimum, smoothness,
// strong convexity, noise variance) and feed the convergence diagnostics.
// Classifiers (softmax regression or a one-hidden-layer ReLU network) are
// trained on a client's share of a labeled dataset with mean cross-entropy.

#include "fedagg/datasets.hpp"
#include "fedagg/rng.hpp"
#include "fedagg/types.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace fedagg {

// ---------------------------------------------------------------------------
// Quadratic: F(w) = 1/2 w'Aw - b'w + c, stochastic gradients carry additive
// N(0, noise_sd^2) noise on every coordinate.

class QuadraticObjective {
 public:
  QuadraticObjective(Matrix a, ParamVector b, double c = 0.0, double noise_sd = 0.0)
      : a_(std::move(a)), b_(std::move(b)), c_(c), noise_sd_(noise_sd) {
    if (a_.rows() != a_.cols()) throw std::invalid_argument("quadratic: A must be square");
    require_dim("quadratic: b", a_.rows(), b_.size());
    if (a_.rows() == 0) throw std::invalid_argument("quadratic: dimension must be positive");
    if (!a_.allFinite() || !b_.allFinite() || !std::isfinite(c_))
      throw std::invalid_argument("quadratic: coefficients must be finite");
    if (!(noise_sd_ >= 0.0) || !std::isfinite(noise_sd_))
      throw std::invalid_argument("quadratic: noise standard deviation must be finite and non-negative");
    const double scale = std::max(1.0, a_.cwiseAbs().maxCoeff());
    if ((a_ - a_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
      throw std::invalid_argument("quadratic: A is not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> eig(a_, Eigen::EigenvaluesOnly);
    mu_ = eig.eigenvalues().minCoeff();
    ell_ = eig.eigenvalues().maxCoeff();
    if (!(mu_ > 0.0)) throw std::invalid_argument("quadratic: A is not positive definite");
  }

  Eigen::Index dim() const { return a_.rows(); }
  const Matrix& a() const { return a_; }
  const ParamVector& b() const { return b_; }
  double c() const { return c_; }
  double noise_sd() const { return noise_sd_; }

  // Per-coordinate noise variance summed over coordinates: E|g - grad F|^2.
  double noise_variance() const { return noise_sd_ * noise_sd_ * static_cast<double>(dim()); }

  double mu() const { return mu_; }
  double ell() const { return ell_; }

  double loss(const ParamVector& w) const {
    require_dim("quadratic loss", dim(), w.size());
    return 0.5 * w.dot(a_ * w) - b_.dot(w) + c_;
  }

  ParamVector gradient(const ParamVector& w) const {
    require_dim("quadratic gradient", dim(), w.size());
    return a_ * w - b_;
  }

  ParamVector stochastic_gradient(const ParamVector& w, Stream& rng) const {
    ParamVector g = gradient(w);
    if (noise_sd_ > 0.0)
      for (Eigen::Index j = 0; j < g.size(); ++j) g[j] += noise_sd_ * rng.normal();
    return g;
  }

 private:
  Matrix a_;
  ParamVector b_;
  double c_;
  double noise_sd_;
  double mu_ = 0.0;
  double ell_ = 0.0;
};

struct Optimum {
  ParamVector w_star;
  double f_star = 0.0;
};

inline Optimum optimum(const QuadraticObjective& q) {
  if (q.ell() / q.mu() > 1e12)
    throw std::invalid_argument("quadratic optimum: A is numerically singular (condition estimate " +
                                std::to_string(q.ell() / q.mu()) + ")");
  Optimum out;
  out.w_star = q.a().llt().solve(q.b());
  // One refinement step keeps the residual at roundoff level for moderately conditioned A.
  const ParamVector r = q.b() - q.a() * out.w_star;
  out.w_star += q.a().llt().solve(r);
  out.f_star = q.loss(out.w_star);
  return out;
}

struct SmoothnessConstants {
  double mu = 0.0;
  double ell = 0.0;
};

inline SmoothnessConstants smoothness_constants(const QuadraticObjective& q) { return {q.mu(), q.ell()}; }

// ---------------------------------------------------------------------------
// Classifiers

enum class Architecture { SoftmaxLinear, Mlp };

inline std::string to_string(Architecture a) { return a == Architecture::SoftmaxLinear ? "softmax-linear" : "mlp"; }

inline Architecture parse_architecture(const std::string& s) {
  if (s == "softmax-linear" || s == "softmax") return Architecture::SoftmaxLinear;
  if (s == "mlp") return Architecture::Mlp;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected softmax-linear or mlp)");
}

// Parameter layout: softmax is [W (k x d, row-major) | b (k)];
// the MLP is [W1 (h x d) | b1 (h) | W2 (k x h) | b2 (k)].
struct ClassifierModel {
  Architecture architecture = Architecture::SoftmaxLinear;
  int n_features = 0;
  int n_classes = 0;
  int hidden = 32;

  Eigen::Index param_dim() const {
    const Eigen::Index d = n_features, k = n_classes, h = hidden;
    return architecture == Architecture::SoftmaxLinear ? k * d + k : h * d + h + k * h + k;
  }

  // Softmax starts at zero; the MLP draws every weight and bias uniformly in
  // +-1/sqrt(fan_in) of its layer.
  ParamVector initial_params(Stream& rng) const {
    ParamVector w = ParamVector::Zero(param_dim());
    if (architecture == Architecture::SoftmaxLinear) return w;
    const Eigen::Index d = n_features, k = n_classes, h = hidden;
    const double r1 = 1.0 / std::sqrt(static_cast<double>(d));
    const double r2 = 1.0 / std::sqrt(static_cast<double>(h));
    Eigen::Index i = 0;
    for (; i < h * d + h; ++i) w[i] = r1 * (2.0 * rng.uniform() - 1.0);
    for (; i < h * d + h + k * h + k; ++i) w[i] = r2 * (2.0 * rng.uniform() - 1.0);
    return w;
  }

  // Class scores (logits) for every row of x.
  RowMatrix scores(const ParamVector& w, const RowMatrix& x) const {
    require_dim("classifier parameters", param_dim(), w.size());
    const Eigen::Index d = n_features, k = n_classes, h = hidden;
    if (architecture == Architecture::SoftmaxLinear) {
      Eigen::Map<const RowMatrix> weights(w.data(), k, d);
      Eigen::Map<const Eigen::VectorXd> bias(w.data() + k * d, k);
      RowMatrix logits = x * weights.transpose();
      logits.rowwise() += bias.transpose();
      return logits;
    }
    Eigen::Map<const RowMatrix> w1(w.data(), h, d);
    Eigen::Map<const Eigen::VectorXd> b1(w.data() + h * d, h);
    Eigen::Map<const RowMatrix> w2(w.data() + h * d + h, k, h);
    Eigen::Map<const Eigen::VectorXd> b2(w.data() + h * d + h + k * h, k);
    RowMatrix hid = x * w1.transpose();
    hid.rowwise() += b1.transpose();
    hid = hid.cwiseMax(0.0);
    RowMatrix logits = hid * w2.transpose();
    logits.rowwise() += b2.transpose();
    return logits;
  }

  // Mean cross-entropy over the rows of x; fills `grad` when non-null.
  double loss_and_gradient(const ParamVector& w, const RowMatrix& x, std::span<const int> y,
                           ParamVector* grad) const {
    require_dim("classifier parameters", param_dim(), w.size());
    const Eigen::Index m = x.rows(), d = n_features, k = n_classes, h = hidden;
    RowMatrix hid;
    RowMatrix logits;
    if (architecture == Architecture::SoftmaxLinear) {
      logits = scores(w, x);
    } else {
      Eigen::Map<const RowMatrix> w1(w.data(), h, d);
      Eigen::Map<const Eigen::VectorXd> b1(w.data() + h * d, h);
      Eigen::Map<const RowMatrix> w2(w.data() + h * d + h, k, h);
      Eigen::Map<const Eigen::VectorXd> b2(w.data() + h * d + h + k * h, k);
      hid = x * w1.transpose();
      hid.rowwise() += b1.transpose();
      hid = hid.cwiseMax(0.0);
      logits = hid * w2.transpose();
      logits.rowwise() += b2.transpose();
    }

    // Softmax probabilities in place; loss is logsumexp minus the true logit.
    double total = 0.0;
    for (Eigen::Index r = 0; r < m; ++r) {
      const double top = logits.row(r).maxCoeff();
      double z = 0.0;
      for (Eigen::Index c = 0; c < k; ++c) z += std::exp(logits(r, c) - top);
      const double lse = top + std::log(z);
      total += lse - logits(r, y[static_cast<std::size_t>(r)]);
      for (Eigen::Index c = 0; c < k; ++c) logits(r, c) = std::exp(logits(r, c) - lse);
    }
    const double loss = total / static_cast<double>(m);
    if (grad == nullptr) return loss;

    RowMatrix& dlogits = logits;  // P - Y, scaled by 1/m
    for (Eigen::Index r = 0; r < m; ++r) dlogits(r, y[static_cast<std::size_t>(r)]) -= 1.0;
    dlogits /= static_cast<double>(m);

    grad->setZero(param_dim());
    if (architecture == Architecture::SoftmaxLinear) {
      Eigen::Map<RowMatrix> gw(grad->data(), k, d);
      Eigen::Map<Eigen::VectorXd> gb(grad->data() + k * d, k);
      gw.noalias() = dlogits.transpose() * x;
      gb = dlogits.colwise().sum().transpose();
      return loss;
    }
    Eigen::Map<const RowMatrix> w2(w.data() + h * d + h, k, h);
    Eigen::Map<RowMatrix> gw1(grad->data(), h, d);
    Eigen::Map<Eigen::VectorXd> gb1(grad->data() + h * d, h);
    Eigen::Map<RowMatrix> gw2(grad->data() + h * d + h, k, h);
    Eigen::Map<Eigen::VectorXd> gb2(grad->data() + h * d + h + k * h, k);
    gw2.noalias() = dlogits.transpose() * hid;
    gb2 = dlogits.colwise().sum().transpose();
    RowMatrix dhid = dlogits * w2;
    dhid = dhid.cwiseProduct((hid.array() > 0.0).cast<double>().matrix());
    gw1.noalias() = dhid.transpose() * x;
    gb1 = dhid.colwise().sum().transpose();
    return loss;
  }
};

// A client's classifier loss over its own samples of a shared dataset.
class ClassifierObjective {
 public:
  ClassifierObjective(ClassifierModel model, std::shared_ptr<const LabeledDataset> data,
                      std::vector<std::size_t> indices)
      : model_(model), data_(std::move(data)), indices_(std::move(indices)) {
    if (!data_) throw std::invalid_argument("classifier objective: no dataset");
    if (indices_.empty()) throw std::invalid_argument("classifier objective: client has no samples");
    if (model_.n_features != data_->n_features())
      throw DimensionMismatch("classifier objective: feature count", model_.n_features, data_->n_features());
    for (auto i : indices_)
      if (i >= data_->size()) throw std::invalid_argument("classifier objective: sample index out of range");
    x_.resize(static_cast<Eigen::Index>(indices_.size()), data_->n_features());
    for (std::size_t r = 0; r < indices_.size(); ++r) {
      x_.row(static_cast<Eigen::Index>(r)) = data_->features.row(static_cast<Eigen::Index>(indices_[r]));
      y_.push_back(data_->labels[indices_[r]]);
    }
  }

  Eigen::Index dim() const { return model_.param_dim(); }
  std::size_t sample_count() const { return indices_.size(); }
  const ClassifierModel& model() const { return model_; }
  const std::shared_ptr<const LabeledDataset>& data() const { return data_; }
  const std::vector<std::size_t>& indices() const { return indices_; }
  const RowMatrix& local_features() const { return x_; }
  const std::vector<int>& local_labels() const { return y_; }

  double loss(const ParamVector& w) const {
    require_dim("classifier loss", dim(), w.size());
    return model_.loss_and_gradient(w, x_, y_, nullptr);
  }

  // Mean gradient over `batch`, given as positions into this client's sample list.
  ParamVector batch_gradient(const ParamVector& w, std::span<const std::size_t> batch) const {
    require_dim("classifier gradient", dim(), w.size());
    if (batch.empty()) throw std::invalid_argument("classifier gradient: empty batch");
    RowMatrix xb(static_cast<Eigen::Index>(batch.size()), x_.cols());
    std::vector<int> yb;
    yb.reserve(batch.size());
    for (std::size_t r = 0; r < batch.size(); ++r) {
      if (batch[r] >= indices_.size()) throw std::invalid_argument("classifier gradient: batch index out of range");
      xb.row(static_cast<Eigen::Index>(r)) = x_.row(static_cast<Eigen::Index>(batch[r]));
      yb.push_back(y_[batch[r]]);
    }
    ParamVector g;
    model_.loss_and_gradient(w, xb, yb, &g);
    return g;
  }

 private:
  ClassifierModel model_;
  std::shared_ptr<const LabeledDataset> data_;
  std::vector<std::size_t> indices_;
  RowMatrix x_;
  std::vector<int> y_;
};

// ---------------------------------------------------------------------------
// Uniform access over both kinds

using ClientObjective = std::variant<QuadraticObjective, ClassifierObjective>;

inline Eigen::Index dim(const ClientObjective& obj) {
  return std::visit([](const auto& o) { return o.dim(); }, obj);
}

inline bool is_quadratic(const ClientObjective& obj) { return std::holds_alternative<QuadraticObjective>(obj); }

inline double loss(const ClientObjective& obj, const ParamVector& w) {
  return std::visit([&](const auto& o) { return o.loss(w); }, obj);
}

// Unbiased estimate of the gradient. Quadratics ignore the batch contents and
// draw their noise from `rng`; classifiers average over the batch.
inline ParamVector grad_minibatch(const ClientObjective& obj, const ParamVector& w, std::span<const std::size_t> batch,
                                  Stream& rng) {
  if (batch.empty()) throw std::invalid_argument("grad_minibatch: empty batch");
  if (const auto* q = std::get_if<QuadraticObjective>(&obj)) return q->stochastic_gradient(w, rng);
  return std::get<ClassifierObjective>(obj).batch_gradient(w, batch);
}

// Samples held by the client; a quadratic behaves as a single-sample client.
inline std::size_t sample_count(const ClientObjective& obj) {
  if (const auto* c = std::get_if<ClassifierObjective>(&obj)) return c->sample_count();
  return 1;
}

// F_i*. Cross-entropy is bounded below by zero, which stands in for classifiers.
inline double f_star(const ClientObjective& obj) {
  if (const auto* q = std::get_if<QuadraticObjective>(&obj)) return optimum(*q).f_star;
  return 0.0;
}

// F = sum_i p_i F_i. Quadratics combine coefficient-wise. Classifiers over one
// dataset and model combine into the pooled objective, which equals the
// weighted sum only when p is proportional to sample counts.
inline ClientObjective global_objective(std::span<const ClientObjective> objs, std::span<const double> p) {
  if (objs.empty()) throw std::invalid_argument("global_objective: no clients");
  if (objs.size() != p.size())
    throw std::invalid_argument("global_objective: " + std::to_string(objs.size()) + " objectives but " +
                                std::to_string(p.size()) + " weights");
  double total = 0.0;
  for (double pi : p) {
    if (!(pi >= 0.0)) throw std::invalid_argument("global_objective: negative weight");
    total += pi;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("global_objective: weights do not sum to 1");
  const auto d = dim(objs[0]);
  for (const auto& o : objs) require_dim("global_objective", d, dim(o));

  if (is_quadratic(objs[0])) {
    Matrix a = Matrix::Zero(d, d);
    ParamVector b = ParamVector::Zero(d);
    double c = 0.0;
    for (std::size_t i = 0; i < objs.size(); ++i) {
      const auto* q = std::get_if<QuadraticObjective>(&objs[i]);
      if (q == nullptr) throw std::invalid_argument("global_objective: mixed objective kinds");
      a += p[i] * q->a();
      b += p[i] * q->b();
      c += p[i] * q->c();
    }
    a = 0.5 * (a + a.transpose());
    return QuadraticObjective(std::move(a), std::move(b), c, 0.0);
  }

  const auto* first = std::get_if<ClassifierObjective>(&objs[0]);
  std::size_t n = 0;
  for (const auto& o : objs) {
    const auto* c = std::get_if<ClassifierObjective>(&o);
    if (c == nullptr) throw std::invalid_argument("global_objective: mixed objective kinds");
    if (c->data() != first->data()) throw std::invalid_argument("global_objective: classifiers over different datasets");
    n += c->sample_count();
  }
  std::vector<std::size_t> pooled;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    const auto& c = std::get<ClassifierObjective>(objs[i]);
    if (std::abs(p[i] - static_cast<double>(c.sample_count()) / static_cast<double>(n)) > 1e-9)
      throw std::invalid_argument("global_objective: classifier weights must be proportional to sample counts");
    pooled.insert(pooled.end(), c.indices().begin(), c.indices().end());
  }
  return ClassifierObjective(first->model(), first->data(), std::move(pooled));
}

}  // namespace fedagg
