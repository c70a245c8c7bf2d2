#include "ecpec/classifier.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cctype>
#include <csignal>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace ecpec {

using nlohmann::json;

std::vector<std::string> BagOfTokensClassifier::features(const std::string& prompt) {
  static const std::string kMarker = "Target utterance:";
  std::string source = prompt;
  auto pos = prompt.rfind(kMarker);
  if (pos != std::string::npos) {
    auto end = prompt.find('\n', pos);
    source = prompt.substr(pos + kMarker.size(), end == std::string::npos ? std::string::npos : end - pos - kMarker.size());
  }
  return tokenize(source, TokenizerOptions{true});
}

std::vector<int> BagOfTokensClassifier::feature_ids(const std::string& prompt) const {
  std::vector<int> ids;
  for (const auto& tok : features(prompt)) {
    auto it = index_.find(tok);
    if (it != index_.end()) ids.push_back(it->second);
  }
  return ids;
}

namespace {

std::vector<double> softmax(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
  for (double& v : p) v /= s;
  return p;
}

}  // namespace

std::vector<double> BagOfTokensClassifier::predict_proba(const std::string& prompt) const {
  if (!params_.contains("erc.w")) throw std::logic_error("BagOfTokensClassifier: not trained");
  const Matrix& w = params_.get("erc.w");
  const Matrix& b = params_.get("erc.b");
  std::vector<double> z(kNumEmotions);
  for (int c = 0; c < kNumEmotions; ++c) z[static_cast<std::size_t>(c)] = b(0, c);
  for (int id : feature_ids(prompt))
    for (int c = 0; c < kNumEmotions; ++c) z[static_cast<std::size_t>(c)] += w(id, c);
  return softmax(z);
}

std::string BagOfTokensClassifier::classify(const std::string& prompt) {
  auto p = predict_proba(prompt);
  int best = 0;
  for (int c = 1; c < kNumEmotions; ++c)
    if (p[static_cast<std::size_t>(c)] > p[static_cast<std::size_t>(best)]) best = c;
  return std::string(emotion_name(static_cast<EmotionLabel>(best)));
}

void BagOfTokensClassifier::train(const std::vector<PromptSample>& samples, const BaselineConfig& config) {
  std::vector<std::vector<std::string>> feats;
  std::vector<int> gold;
  vocab_.clear();
  index_.clear();
  for (const auto& s : samples) {
    if (s.task != PromptTask::erc) continue;
    auto label = emotion_from_name(s.gold_answer);
    if (!label) continue;
    feats.push_back(features(s.rendered_prompt));
    gold.push_back(code_of(*label));
    for (const auto& tok : feats.back())
      if (index_.emplace(tok, static_cast<int>(vocab_.size())).second) vocab_.push_back(tok);
  }
  if (feats.empty()) throw std::invalid_argument("BagOfTokensClassifier: no ERC samples to train on");

  const auto V = static_cast<Eigen::Index>(vocab_.size());
  Matrix w = Matrix::Zero(V, kNumEmotions);
  Matrix b = Matrix::Zero(1, kNumEmotions);
  const double n = static_cast<double>(feats.size());
  std::vector<std::vector<int>> ids(feats.size());
  for (std::size_t i = 0; i < feats.size(); ++i)
    for (const auto& tok : feats[i]) ids[i].push_back(index_.at(tok));

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Matrix gw = config.l2 * w;
    Matrix gb = Matrix::Zero(1, kNumEmotions);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      std::vector<double> z(kNumEmotions);
      for (int c = 0; c < kNumEmotions; ++c) z[static_cast<std::size_t>(c)] = b(0, c);
      for (int id : ids[i])
        for (int c = 0; c < kNumEmotions; ++c) z[static_cast<std::size_t>(c)] += w(id, c);
      auto p = softmax(z);
      // d/dz of -log p_y  +  coarse_weight * -log P_coarse(y)
      const CoarseLabel gc = coarse_of(static_cast<EmotionLabel>(gold[i]));
      double pc = 0.0;
      for (int c = 0; c < kNumEmotions; ++c)
        if (coarse_of(static_cast<EmotionLabel>(c)) == gc) pc += p[static_cast<std::size_t>(c)];
      for (int c = 0; c < kNumEmotions; ++c) {
        const double pv = p[static_cast<std::size_t>(c)];
        double d = pv - (c == gold[i] ? 1.0 : 0.0);
        const bool in_group = coarse_of(static_cast<EmotionLabel>(c)) == gc;
        d += config.coarse_weight * (pv - (in_group ? pv / pc : 0.0));
        d /= n;
        gb(0, c) += d;
        for (int id : ids[i]) gw(id, c) += d;
      }
    }
    w -= config.lr * gw;
    b -= config.lr * gb;
  }
  params_ = ParameterStore();
  params_.set("erc.w", std::move(w));
  params_.set("erc.b", std::move(b));
}

void BagOfTokensClassifier::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  json j = {{"format", "ecpec-erc-baseline/1"}, {"vocab", vocab_}, {"params", params_.to_json()}};
  out << j.dump() << '\n';
}

BagOfTokensClassifier BagOfTokensClassifier::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (j.value("format", "") != "ecpec-erc-baseline/1") throw std::runtime_error(path + ": not an ERC baseline checkpoint");
  BagOfTokensClassifier c;
  c.vocab_ = j.at("vocab").get<std::vector<std::string>>();
  for (std::size_t i = 0; i < c.vocab_.size(); ++i) c.index_.emplace(c.vocab_[i], static_cast<int>(i));
  Manifest manifest = {{"erc.w", {static_cast<Eigen::Index>(c.vocab_.size()), kNumEmotions}},
                       {"erc.b", {1, kNumEmotions}}};
  c.params_ = ParameterStore::from_json(j.at("params"), &manifest);
  return c;
}

// ---------------------------------------------------------------------------

SubprocessClassifier::SubprocessClassifier(const std::string& command) {
  int in_pipe[2], out_pipe[2];
  if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) throw std::runtime_error("SubprocessClassifier: pipe failed");
  pid_t pid = fork();
  if (pid < 0) throw std::runtime_error("SubprocessClassifier: fork failed");
  if (pid == 0) {
    dup2(in_pipe[0], STDIN_FILENO);
    dup2(out_pipe[1], STDOUT_FILENO);
    close(in_pipe[0]);
    close(in_pipe[1]);
    close(out_pipe[0]);
    close(out_pipe[1]);
    execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  close(in_pipe[0]);
  close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  pid_ = pid;
  std::signal(SIGPIPE, SIG_IGN);
}

SubprocessClassifier::~SubprocessClassifier() {
  if (to_child_ >= 0) close(to_child_);
  if (from_child_ >= 0) close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    waitpid(pid_, &status, 0);
  }
}

std::string SubprocessClassifier::classify(const std::string& prompt) {
  std::string line = json{{"prompt", prompt}}.dump() + "\n";
  std::size_t written = 0;
  while (written < line.size()) {
    ssize_t n = write(to_child_, line.data() + written, line.size() - written);
    if (n <= 0) throw std::runtime_error("SubprocessClassifier: classifier process closed its input");
    written += static_cast<std::size_t>(n);
  }
  for (;;) {
    auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string reply = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      try {
        return json::parse(reply).at("label").get<std::string>();
      } catch (const json::exception& e) {
        throw std::runtime_error(std::string("SubprocessClassifier: bad reply: ") + e.what());
      }
    }
    char buf[4096];
    ssize_t n = read(from_child_, buf, sizeof(buf));
    if (n <= 0) throw std::runtime_error("SubprocessClassifier: classifier process exited");
    buffer_.append(buf, static_cast<std::size_t>(n));
  }
}

// ---------------------------------------------------------------------------

HttpClassifier::HttpClassifier(std::string host, int port, std::string path)
    : host_(std::move(host)), port_(port), path_(std::move(path)) {}

std::string HttpClassifier::classify(const std::string& prompt) {
  httplib::Client client(host_, port_);
  client.set_read_timeout(30, 0);
  auto res = client.Post(path_, json{{"prompt", prompt}}.dump(), "application/json");
  if (!res) throw std::runtime_error("HttpClassifier: request to " + host_ + " failed");
  if (res->status != 200) throw std::runtime_error("HttpClassifier: HTTP " + std::to_string(res->status));
  try {
    return json::parse(res->body).at("label").get<std::string>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("HttpClassifier: bad reply: ") + e.what());
  }
}

}  // namespace ecpec
