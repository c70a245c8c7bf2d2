#pragma once

// Stage-1 emotion sources behind a prompt -> label interface.

#include "ecpec/params.hpp"
#include "ecpec/taxonomy.hpp"

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace ecpec {

class TextClassifier {
 public:
  virtual ~TextClassifier() = default;
  // Free-form answer; callers run it through parse_label.
  virtual std::string classify(const std::string& prompt) = 0;
};

struct BaselineConfig {
  int epochs = 500;
  double lr = 5.0;
  double l2 = 1e-4;
  double coarse_weight = 0.5;  // weight of the coarse-level cross-entropy
};

// Softmax regression over a bag of target-utterance tokens, trained with a
// fine (7-way) plus coarse (neutral/positive/negative) objective.
class BagOfTokensClassifier : public TextClassifier {
 public:
  BagOfTokensClassifier() = default;

  void train(const std::vector<PromptSample>& samples, const BaselineConfig& config = {});
  std::string classify(const std::string& prompt) override;

  // Probability row over the 7 emotions.
  std::vector<double> predict_proba(const std::string& prompt) const;

  void save(const std::string& path) const;
  static BagOfTokensClassifier load(const std::string& path);

  // Tokens of the "Target utterance:" line, lowercased; whole prompt if absent.
  static std::vector<std::string> features(const std::string& prompt);

 private:
  std::vector<int> feature_ids(const std::string& prompt) const;

  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
  ParameterStore params_;  // "erc.w" (V x 7), "erc.b" (1 x 7)
};

// Line-delimited JSON over a child process: writes {"prompt": ...}, reads {"label": ...}.
class SubprocessClassifier : public TextClassifier {
 public:
  explicit SubprocessClassifier(const std::string& command);
  ~SubprocessClassifier() override;
  SubprocessClassifier(const SubprocessClassifier&) = delete;
  SubprocessClassifier& operator=(const SubprocessClassifier&) = delete;

  std::string classify(const std::string& prompt) override;

 private:
  int to_child_ = -1;
  int from_child_ = -1;
  int pid_ = -1;
  std::string buffer_;
};

// HTTP POST {"prompt"} -> {"label"}.
class HttpClassifier : public TextClassifier {
 public:
  HttpClassifier(std::string host, int port, std::string path = "/classify");
  std::string classify(const std::string& prompt) override;

 private:
  std::string host_;
  int port_;
  std::string path_;
};

}  // namespace ecpec
