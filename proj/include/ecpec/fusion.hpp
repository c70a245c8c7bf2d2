#pragma once

// Acoustic / visual feature handling: sparse feature selection,
// standardization and concatenation with text representations, and face
// identity matching.

#include "ecpec/autodiff.hpp"
#include "ecpec/corpus.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ecpec {

// ---- feature selection ------------------------------------------------------

enum class SelectionMode { l1, variance };

struct L1Options {
  int max_iter = 3000;
  double tol = 1e-9;
  int bisection_steps = 40;
};

struct L1Fit {
  std::vector<double> weights;  // on standardized columns
  double bias = 0.0;
  double lambda = 0.0;
  int nonzero = 0;
};

// Mean logistic loss + lambda * |w|_1 on standardized columns, solved with
// accelerated proximal gradient. The bias is not penalized.
L1Fit fit_l1_logistic(const Matrix& X, const std::vector<int>& y, double lambda, const L1Options& options = {});

struct FeatureSelection {
  SelectionMode mode = SelectionMode::l1;
  std::vector<int> indices;     // ordered by decreasing importance
  std::vector<double> weights;  // importance of each selected index
  double lambda = 0.0;
};

// Smallest penalty found by bisection that still leaves >= target_dim
// nonzero weights; the target_dim largest |w| are returned. Selecting every
// column returns 0..D-1 in order.
FeatureSelection l1_select_features(const Matrix& X, const std::vector<int>& y, int target_dim,
                                    const L1Options& options = {});

// Columns with the largest variance, no classifier involved.
FeatureSelection variance_select_features(const Matrix& X, int target_dim);

Matrix apply_selection(const Matrix& X, const FeatureSelection& selection);

// ---- standardization and concatenation --------------------------------------

class StandardScaler {
 public:
  static StandardScaler fit(const Matrix& X);

  int dim() const { return static_cast<int>(mean_.size()); }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& scale() const { return scale_; }

  // Throws std::invalid_argument on a dimension the scaler was not fitted on.
  Matrix transform(const Matrix& X) const;
  std::vector<double> transform(const std::vector<double>& x) const;

  nlohmann::json to_json() const;
  static StandardScaler from_json(const nlohmann::json& j);

 private:
  std::vector<double> mean_;
  std::vector<double> scale_;  // population std; 1 for constant columns
};

// [text || standardize(modality) * projection]; no projection keeps the raw width.
std::vector<double> concat_features(const std::vector<double>& text_rep, const FeatureVector& modality,
                                    const StandardScaler& scaler, const Matrix* projection = nullptr);

// Row-wise form for a whole conversation.
Matrix concat_features(const Matrix& text_reps, const Matrix& modality, const StandardScaler& scaler,
                       const Matrix* projection = nullptr);

nlohmann::json selection_to_json(const FeatureSelection& selection, const StandardScaler& scaler);
std::pair<FeatureSelection, StandardScaler> selection_from_json(const nlohmann::json& j);

// CSV rows "utterance_id,v0,...,vD-1"; a first row starting with
// "utterance_id" is treated as a header. Ids are "<conversation>:<index>".
std::map<std::string, std::vector<double>> load_feature_csv(const std::string& path);
void save_feature_csv(const std::string& path, const std::map<std::string, std::vector<double>>& rows);
std::string utterance_key(const std::string& conversation, int index);

// ---- faces --------------------------------------------------------------------

struct BoundingBox {
  double x = 0, y = 0, w = 0, h = 0;
  double area() const { return w * h; }
};

struct FaceObservation {
  BoundingBox bbox;
  std::vector<double> identity_embedding;
  std::vector<double> emotion_embedding;
};

class MatchDatabase {
 public:
  explicit MatchDatabase(double threshold = 0.6) : threshold_(threshold) {}

  // Stored L2-normalized; zero or non-finite embeddings are rejected.
  void add(const std::string& protagonist, const std::vector<double>& embedding);
  bool contains(const std::string& protagonist) const;
  bool empty() const { return entries_.empty(); }
  double threshold() const { return threshold_; }
  void set_threshold(double t) { threshold_ = t; }

  struct Entry {
    std::string protagonist;
    std::vector<double> embedding;
  };
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  double threshold_;
  std::vector<Entry> entries_;
};

struct FaceMatch {
  std::string protagonist;
  double similarity = 0.0;
};

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

// Best cosine match at or above the threshold. A zero-norm query yields no
// match and, when `warning` is given, an explanation.
std::optional<FaceMatch> match_face(const FaceObservation& observation, const MatchDatabase& db,
                                    std::string* warning = nullptr);

// Matched speaker face, else the largest face, else zeros of out_dim.
FeatureVector face_features_for_utterance(const std::vector<FaceObservation>& observations,
                                          const std::string& speaker, const MatchDatabase& db, std::size_t out_dim);

}  // namespace ecpec
