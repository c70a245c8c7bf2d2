#pragma once

#include "ecpec/autodiff.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecpec {

class ParameterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Deterministic sampling on top of mt19937_64. The standard distributions
// are implementation-defined, so they are avoided for anything persisted.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t index(std::size_t n);  // [0, n)
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Shape of every expected array, used to validate checkpoints.
using Manifest = std::map<std::string, std::pair<Eigen::Index, Eigen::Index>>;

// Named float arrays for every trainable module.
class ParameterStore {
 public:
  void set(const std::string& name, Matrix value);
  bool contains(const std::string& name) const { return arrays_.count(name) != 0; }
  const Matrix& get(const std::string& name) const;
  Matrix& get(const std::string& name);

  void init_uniform(const std::string& name, Eigen::Index rows, Eigen::Index cols, double limit, Rng& rng);
  void init_xavier(const std::string& name, Eigen::Index rows, Eigen::Index cols, Rng& rng);
  void init_normal(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);
  void init_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value);

  const std::map<std::string, Matrix>& arrays() const { return arrays_; }
  std::size_t size() const { return arrays_.size(); }
  std::size_t num_values() const;
  Manifest manifest() const;

  // Values are written as hex floats so that a round trip is exact.
  nlohmann::json to_json() const;
  static ParameterStore from_json(const nlohmann::json& j, const Manifest* manifest = nullptr);

  void save(const std::string& path) const;
  static ParameterStore load(const std::string& path, const Manifest* manifest = nullptr);

  bool operator==(const ParameterStore& other) const;

 private:
  std::map<std::string, Matrix> arrays_;
};

class GradStore {
 public:
  Matrix& at(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  const Matrix* find(const std::string& name) const;
  const std::map<std::string, Matrix>& arrays() const { return grads_; }
  void scale(double s);
  void clear() { grads_.clear(); }
  double max_abs() const;

 private:
  std::map<std::string, Matrix> grads_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // global norm; <= 0 disables
  double weight_decay = 0.0;  // decoupled, applied to every updated array
};

class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}
  void step(ParameterStore& params, const GradStore& grads);
  long steps() const { return step_; }

 private:
  AdamConfig config_;
  long step_ = 0;
  std::map<std::string, Matrix> m_;
  std::map<std::string, Matrix> v_;
};

std::string to_hex_float(double v);
double from_hex_float(const std::string& s);

}  // namespace ecpec
