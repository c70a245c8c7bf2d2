#include "ecpec/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ecpec {

using nlohmann::json;

namespace {

Matrix standardize_columns(const Matrix& X) {
  Matrix Z = X.rowwise() - X.colwise().mean();
  for (Eigen::Index c = 0; c < Z.cols(); ++c) {
    const double sd = std::sqrt(Z.col(c).squaredNorm() / static_cast<double>(Z.rows()));
    if (sd > 0) Z.col(c) /= sd;
    else Z.col(c).setZero();
  }
  return Z;
}

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

void check_labels(const Matrix& X, const std::vector<int>& y) {
  if (X.rows() < 2) throw std::invalid_argument("feature selection: at least two samples required");
  if (static_cast<Eigen::Index>(y.size()) != X.rows()) throw std::invalid_argument("feature selection: one label per row");
  bool has0 = false, has1 = false;
  for (int v : y) {
    if (v != 0 && v != 1) throw std::invalid_argument("feature selection: labels must be 0 or 1");
    (v ? has1 : has0) = true;
  }
  if (!has0 || !has1) throw std::invalid_argument("feature selection: labels contain a single class");
}

// Largest eigenvalue of A^T A / n with a constant start vector.
double lipschitz(const Matrix& A) {
  Eigen::VectorXd v = Eigen::VectorXd::Ones(A.cols()).normalized();
  double lambda = 0.0;
  for (int i = 0; i < 100; ++i) {
    Eigen::VectorXd w = A.transpose() * (A * v);
    const double norm = w.norm();
    if (norm == 0) break;
    const double next = v.dot(w);
    v = w / norm;
    if (std::abs(next - lambda) <= 1e-10 * std::max(1.0, next)) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return std::max(lambda, 1e-12) / static_cast<double>(A.rows());
}

L1Fit fit_standardized(const Matrix& Z, const Eigen::VectorXd& y, double lambda, double step, const L1Options& o) {
  const auto n = static_cast<double>(Z.rows());
  const auto d = Z.cols();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(d), w_prev = w, v = w;
  double b = 0.0, b_prev = 0.0, bv = 0.0, t = 1.0;
  for (int it = 0; it < o.max_iter; ++it) {
    Eigen::VectorXd z = Z * v;
    Eigen::VectorXd r(Z.rows());
    for (Eigen::Index i = 0; i < Z.rows(); ++i) r(i) = sigmoid(z(i) + bv) - y(i);
    Eigen::VectorXd grad = Z.transpose() * r / n;
    const double gb = r.sum() / n;
    Eigen::VectorXd u = v - step * grad;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double s = std::abs(u(j)) - step * lambda;
      w(j) = s > 0 ? std::copysign(s, u(j)) : 0.0;
    }
    b = bv - step * gb;
    const double t_next = (1 + std::sqrt(1 + 4 * t * t)) / 2;
    const double mom = (t - 1) / t_next;
    const double change = std::max((w - w_prev).cwiseAbs().maxCoeff(), std::abs(b - b_prev));
    v = w + mom * (w - w_prev);
    bv = b + mom * (b - b_prev);
    w_prev = w;
    b_prev = b;
    t = t_next;
    if (change < o.tol) break;
  }
  L1Fit fit;
  fit.weights.assign(w.data(), w.data() + d);
  fit.bias = b;
  fit.lambda = lambda;
  fit.nonzero = static_cast<int>((w.array() != 0.0).count());
  return fit;
}

double lipschitz_with_bias(const Matrix& Z) {
  Matrix A(Z.rows(), Z.cols() + 1);
  A << Z, Matrix::Ones(Z.rows(), 1);
  return 0.25 * lipschitz(A);
}

}  // namespace

L1Fit fit_l1_logistic(const Matrix& X, const std::vector<int>& y, double lambda, const L1Options& options) {
  check_labels(X, y);
  if (lambda < 0) throw std::invalid_argument("fit_l1_logistic: lambda must be >= 0");
  const Matrix Z = standardize_columns(X);
  Eigen::VectorXd yv(Z.rows());
  for (Eigen::Index i = 0; i < Z.rows(); ++i) yv(i) = y[static_cast<std::size_t>(i)];
  return fit_standardized(Z, yv, lambda, 1.0 / lipschitz_with_bias(Z), options);
}

FeatureSelection l1_select_features(const Matrix& X, const std::vector<int>& y, int target_dim,
                                    const L1Options& options) {
  check_labels(X, y);
  const int D = static_cast<int>(X.cols());
  if (target_dim < 1 || target_dim > D) throw std::invalid_argument("l1_select_features: target_dim must lie in [1, D]");
  FeatureSelection sel;
  sel.mode = SelectionMode::l1;
  if (target_dim == D) {
    sel.indices.resize(static_cast<std::size_t>(D));
    std::iota(sel.indices.begin(), sel.indices.end(), 0);
    sel.weights.assign(static_cast<std::size_t>(D), 1.0);
    return sel;
  }

  const Matrix Z = standardize_columns(X);
  Eigen::VectorXd yv(Z.rows());
  for (Eigen::Index i = 0; i < Z.rows(); ++i) yv(i) = y[static_cast<std::size_t>(i)];
  const double step = 1.0 / lipschitz_with_bias(Z);
  const double lambda_max =
      (Z.transpose() * (yv.array() - yv.mean()).matrix()).cwiseAbs().maxCoeff() / static_cast<double>(Z.rows());

  // Bisection in log space for the largest penalty with enough survivors.
  double lo = std::log(lambda_max * 1e-6 + 1e-300), hi = std::log(lambda_max + 1e-300);
  L1Fit best = fit_standardized(Z, yv, std::exp(lo), step, options);
  if (best.nonzero >= target_dim) {
    for (int i = 0; i < options.bisection_steps; ++i) {
      const double mid = 0.5 * (lo + hi);
      L1Fit fit = fit_standardized(Z, yv, std::exp(mid), step, options);
      if (fit.nonzero >= target_dim) {
        best = std::move(fit);
        lo = mid;
      } else {
        hi = mid;
      }
    }
  }

  std::vector<int> order(static_cast<std::size_t>(D));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return std::abs(best.weights[static_cast<std::size_t>(a)]) > std::abs(best.weights[static_cast<std::size_t>(b)]);
  });
  order.resize(static_cast<std::size_t>(target_dim));
  sel.indices = order;
  for (int i : order) sel.weights.push_back(best.weights[static_cast<std::size_t>(i)]);
  sel.lambda = best.lambda;
  return sel;
}

FeatureSelection variance_select_features(const Matrix& X, int target_dim) {
  const int D = static_cast<int>(X.cols());
  if (X.rows() < 1) throw std::invalid_argument("variance selection: no samples");
  if (target_dim < 1 || target_dim > D) throw std::invalid_argument("variance selection: target_dim must lie in [1, D]");
  const Matrix centered = X.rowwise() - X.colwise().mean();
  std::vector<double> var(static_cast<std::size_t>(D));
  for (int c = 0; c < D; ++c) var[static_cast<std::size_t>(c)] = centered.col(c).squaredNorm() / static_cast<double>(X.rows());
  std::vector<int> order(static_cast<std::size_t>(D));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return var[static_cast<std::size_t>(a)] > var[static_cast<std::size_t>(b)]; });
  order.resize(static_cast<std::size_t>(target_dim));
  FeatureSelection sel;
  sel.mode = SelectionMode::variance;
  sel.indices = order;
  for (int i : order) sel.weights.push_back(var[static_cast<std::size_t>(i)]);
  return sel;
}

Matrix apply_selection(const Matrix& X, const FeatureSelection& selection) {
  Matrix out(X.rows(), static_cast<Eigen::Index>(selection.indices.size()));
  for (std::size_t k = 0; k < selection.indices.size(); ++k) {
    const int c = selection.indices[k];
    if (c < 0 || c >= X.cols()) throw std::invalid_argument("apply_selection: index outside the feature matrix");
    out.col(static_cast<Eigen::Index>(k)) = X.col(c);
  }
  return out;
}

// ---------------------------------------------------------------------------

StandardScaler StandardScaler::fit(const Matrix& X) {
  if (X.rows() < 1) throw std::invalid_argument("StandardScaler: no samples");
  StandardScaler s;
  const auto n = static_cast<double>(X.rows());
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    const double mu = X.col(c).mean();
    const double sd = std::sqrt((X.col(c).array() - mu).square().sum() / n);
    s.mean_.push_back(mu);
    s.scale_.push_back(sd > 0 ? sd : 1.0);
  }
  return s;
}

Matrix StandardScaler::transform(const Matrix& X) const {
  if (X.cols() != dim())
    throw std::invalid_argument("StandardScaler: fitted on " + std::to_string(dim()) + " features, got " +
                                std::to_string(X.cols()));
  Matrix out = X;
  for (Eigen::Index c = 0; c < X.cols(); ++c)
    out.col(c) = (X.col(c).array() - mean_[static_cast<std::size_t>(c)]) / scale_[static_cast<std::size_t>(c)];
  return out;
}

std::vector<double> StandardScaler::transform(const std::vector<double>& x) const {
  if (static_cast<int>(x.size()) != dim())
    throw std::invalid_argument("StandardScaler: fitted on " + std::to_string(dim()) + " features, got " +
                                std::to_string(x.size()));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean_[i]) / scale_[i];
  return out;
}

json StandardScaler::to_json() const { return {{"mean", mean_}, {"scale", scale_}}; }

StandardScaler StandardScaler::from_json(const json& j) {
  StandardScaler s;
  s.mean_ = j.at("mean").get<std::vector<double>>();
  s.scale_ = j.at("scale").get<std::vector<double>>();
  if (s.mean_.size() != s.scale_.size()) throw ConfigError("scaler: mean/scale length mismatch");
  for (double v : s.scale_)
    if (!(v > 0)) throw ConfigError("scaler: scale entries must be positive");
  return s;
}

std::vector<double> concat_features(const std::vector<double>& text_rep, const FeatureVector& modality,
                                    const StandardScaler& scaler, const Matrix* projection) {
  Matrix text = Eigen::Map<const Matrix>(text_rep.data(), 1, static_cast<Eigen::Index>(text_rep.size()));
  Matrix mod = Eigen::Map<const Matrix>(modality.values.data(), 1, static_cast<Eigen::Index>(modality.values.size()));
  Matrix fused = concat_features(text, mod, scaler, projection);
  return std::vector<double>(fused.data(), fused.data() + fused.size());
}

Matrix concat_features(const Matrix& text_reps, const Matrix& modality, const StandardScaler& scaler,
                       const Matrix* projection) {
  if (text_reps.rows() != modality.rows()) throw std::invalid_argument("concat_features: row count mismatch");
  Matrix mod = scaler.transform(modality);
  if (projection) {
    if (projection->rows() != mod.cols()) throw std::invalid_argument("concat_features: projection shape mismatch");
    mod = mod * *projection;
  }
  Matrix out(text_reps.rows(), text_reps.cols() + mod.cols());
  out << text_reps, mod;
  return out;
}

json selection_to_json(const FeatureSelection& s, const StandardScaler& scaler) {
  return {{"format", "ecpec-selection/1"},
          {"mode", s.mode == SelectionMode::l1 ? "l1" : "variance"},
          {"indices", s.indices},
          {"weights", s.weights},
          {"lambda", s.lambda},
          {"scaler", scaler.to_json()}};
}

std::pair<FeatureSelection, StandardScaler> selection_from_json(const json& j) {
  try {
    if (j.value("format", "") != "ecpec-selection/1") throw ConfigError("not a feature selection artifact");
    FeatureSelection s;
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "l1") s.mode = SelectionMode::l1;
    else if (mode == "variance") s.mode = SelectionMode::variance;
    else throw ConfigError("selection: unknown mode '" + mode + "'");
    s.indices = j.at("indices").get<std::vector<int>>();
    s.weights = j.at("weights").get<std::vector<double>>();
    s.lambda = j.at("lambda").get<double>();
    StandardScaler scaler = StandardScaler::from_json(j.at("scaler"));
    if (scaler.dim() != static_cast<int>(s.indices.size()))
      throw ConfigError("selection: scaler width differs from the number of selected features");
    return {s, scaler};
  } catch (const json::exception& e) {
    throw ConfigError(std::string("selection: ") + e.what());
  }
}

std::string utterance_key(const std::string& conversation, int index) {
  return conversation + ":" + std::to_string(index);
}

std::map<std::string, std::vector<double>> load_feature_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot read " + path);
  std::map<std::string, std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, cell;
    std::getline(ss, id, ',');
    if (line_no == 1 && id == "utterance_id") continue;
    std::vector<double> values;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        double v = std::stod(cell, &used);
        if (!std::isfinite(v)) throw std::invalid_argument(cell);
        values.push_back(v);
      } catch (const std::exception&) {
        throw DatasetError(path + ":" + std::to_string(line_no) + ": bad value '" + cell + "'");
      }
    }
    if (width == 0) width = values.size();
    if (values.empty() || values.size() != width)
      throw DatasetError(path + ":" + std::to_string(line_no) + ": inconsistent row width");
    if (!rows.emplace(id, std::move(values)).second)
      throw DatasetError(path + ":" + std::to_string(line_no) + ": duplicate id '" + id + "'");
  }
  return rows;
}

void save_feature_csv(const std::string& path, const std::map<std::string, std::vector<double>>& rows) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write " + path);
  out.precision(17);
  std::size_t width = rows.empty() ? 0 : rows.begin()->second.size();
  out << "utterance_id";
  for (std::size_t i = 0; i < width; ++i) out << ",v" << i;
  out << '\n';
  for (const auto& [id, values] : rows) {
    out << id;
    for (double v : values) out << ',' << v;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

namespace {

double norm_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

void MatchDatabase::add(const std::string& protagonist, const std::vector<double>& embedding) {
  const double n = norm_of(embedding);
  if (!std::isfinite(n) || n == 0) throw std::invalid_argument("MatchDatabase: embedding must be finite and non-zero");
  if (!entries_.empty() && entries_.front().embedding.size() != embedding.size())
    throw std::invalid_argument("MatchDatabase: embedding size mismatch");
  Entry e{protagonist, embedding};
  for (double& x : e.embedding) x /= n;
  entries_.push_back(std::move(e));
}

bool MatchDatabase::contains(const std::string& protagonist) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.protagonist == protagonist; });
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: size mismatch");
  const double na = norm_of(a), nb = norm_of(b);
  if (na == 0 || nb == 0) return 0.0;
  double dot = 0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / (na * nb);
}

std::optional<FaceMatch> match_face(const FaceObservation& observation, const MatchDatabase& db, std::string* warning) {
  if (db.empty()) throw std::invalid_argument("match_face: empty match database");
  const double n = norm_of(observation.identity_embedding);
  if (!std::isfinite(n) || n == 0) {
    if (warning) *warning = "face embedding has zero norm; no match attempted";
    return std::nullopt;
  }
  std::optional<FaceMatch> best;
  for (const auto& e : db.entries()) {
    const double sim = cosine_similarity(observation.identity_embedding, e.embedding);
    if (!best || sim > best->similarity) best = FaceMatch{e.protagonist, sim};
  }
  if (best && best->similarity >= db.threshold()) return best;
  return std::nullopt;
}

FeatureVector face_features_for_utterance(const std::vector<FaceObservation>& observations, const std::string& speaker,
                                          const MatchDatabase& db, std::size_t out_dim) {
  FeatureVector out;
  out.source = FeatureSource::face_emotion;
  const FaceObservation* chosen = nullptr;
  if (!db.empty() && db.contains(speaker)) {
    for (const auto& o : observations) {
      auto m = match_face(o, db);
      if (m && m->protagonist == speaker) {
        chosen = &o;
        break;
      }
    }
  }
  if (!chosen)
    for (const auto& o : observations)
      if (!chosen || o.bbox.area() > chosen->bbox.area()) chosen = &o;
  out.values.assign(out_dim, 0.0);
  if (chosen)
    for (std::size_t i = 0; i < out_dim && i < chosen->emotion_embedding.size(); ++i)
      out.values[i] = std::isfinite(chosen->emotion_embedding[i]) ? chosen->emotion_embedding[i] : 0.0;
  return out;
}

}  // namespace ecpec
