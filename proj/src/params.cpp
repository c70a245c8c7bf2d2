#include "ecpec/params.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace ecpec {

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  while (u1 <= 0.0) u1 = uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * M_PI * u2);
  has_spare_ = true;
  return r * std::cos(2.0 * M_PI * u2);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::index: empty range");
  return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

// ---------------------------------------------------------------------------

std::string to_hex_float(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

double from_hex_float(const std::string& s) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw ParameterError("malformed float literal '" + s + "'");
  return v;
}

void ParameterStore::set(const std::string& name, Matrix value) { arrays_[name] = std::move(value); }

const Matrix& ParameterStore::get(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw ParameterError("unknown parameter '" + name + "'");
  return it->second;
}

Matrix& ParameterStore::get(const std::string& name) {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw ParameterError("unknown parameter '" + name + "'");
  return it->second;
}

void ParameterStore::init_uniform(const std::string& name, Eigen::Index rows, Eigen::Index cols, double limit,
                                  Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(-limit, limit);
  set(name, std::move(m));
}

void ParameterStore::init_xavier(const std::string& name, Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  init_uniform(name, rows, cols, std::sqrt(6.0 / static_cast<double>(rows + cols)), rng);
}

void ParameterStore::init_normal(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev,
                                 Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = stddev * rng.normal();
  set(name, std::move(m));
}

void ParameterStore::init_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value) {
  set(name, Matrix::Constant(rows, cols, value));
}

std::size_t ParameterStore::num_values() const {
  std::size_t n = 0;
  for (const auto& [name, m] : arrays_) n += static_cast<std::size_t>(m.size());
  return n;
}

Manifest ParameterStore::manifest() const {
  Manifest out;
  for (const auto& [name, m] : arrays_) out[name] = {m.rows(), m.cols()};
  return out;
}

nlohmann::json ParameterStore::to_json() const {
  nlohmann::json arrays = nlohmann::json::object();
  for (const auto& [name, m] : arrays_) {
    nlohmann::json data = nlohmann::json::array();
    for (Eigen::Index k = 0; k < m.size(); ++k) data.push_back(to_hex_float(m.data()[k]));
    arrays[name] = {{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
  }
  return {{"format", "ecpec-params/1"}, {"arrays", std::move(arrays)}};
}

ParameterStore ParameterStore::from_json(const nlohmann::json& j, const Manifest* manifest) {
  if (!j.is_object() || j.value("format", "") != "ecpec-params/1" || !j.contains("arrays"))
    throw ParameterError("not an ecpec-params/1 document");
  ParameterStore store;
  for (const auto& [name, entry] : j.at("arrays").items()) {
    const auto& shape = entry.at("shape");
    if (!shape.is_array() || shape.size() != 2) throw ParameterError("parameter '" + name + "': bad shape");
    Eigen::Index rows = shape[0].get<Eigen::Index>(), cols = shape[1].get<Eigen::Index>();
    const auto& data = entry.at("data");
    if (!data.is_array() || static_cast<Eigen::Index>(data.size()) != rows * cols)
      throw ParameterError("parameter '" + name + "': data length does not match shape");
    if (manifest) {
      auto it = manifest->find(name);
      if (it == manifest->end()) throw ParameterError("unexpected parameter '" + name + "'");
      if (it->second != std::make_pair(rows, cols))
        throw ParameterError("parameter '" + name + "': shape differs from model manifest");
    }
    Matrix m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = from_hex_float(data[static_cast<std::size_t>(k)]);
    store.set(name, std::move(m));
  }
  if (manifest) {
    for (const auto& [name, shape] : *manifest)
      if (!store.contains(name)) throw ParameterError("missing parameter '" + name + "'");
  }
  return store;
}

void ParameterStore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParameterError("cannot write " + path);
  out << to_json().dump() << '\n';
}

ParameterStore ParameterStore::load(const std::string& path, const Manifest* manifest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParameterError("cannot read " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParameterError(path + ": " + e.what());
  }
  return from_json(j, manifest);
}

bool ParameterStore::operator==(const ParameterStore& other) const {
  if (arrays_.size() != other.arrays_.size()) return false;
  for (const auto& [name, m] : arrays_) {
    auto it = other.arrays_.find(name);
    if (it == other.arrays_.end() || it->second.rows() != m.rows() || it->second.cols() != m.cols()) return false;
    if (m != it->second) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

Matrix& GradStore::at(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  auto it = grads_.find(name);
  if (it == grads_.end()) it = grads_.emplace(name, Matrix::Zero(rows, cols)).first;
  return it->second;
}

const Matrix* GradStore::find(const std::string& name) const {
  auto it = grads_.find(name);
  return it == grads_.end() ? nullptr : &it->second;
}

void GradStore::scale(double s) {
  for (auto& [name, m] : grads_) m *= s;
}

double GradStore::max_abs() const {
  double mx = 0.0;
  for (const auto& [name, m] : grads_)
    if (m.size() > 0) mx = std::max(mx, m.cwiseAbs().maxCoeff());
  return mx;
}

void Adam::step(ParameterStore& params, const GradStore& grads) {
  ++step_;
  double factor = 1.0;
  if (config_.clip_norm > 0) {
    double sq = 0.0;
    for (const auto& [name, g] : grads.arrays()) sq += g.squaredNorm();
    double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) factor = config_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (const auto& [name, graw] : grads.arrays()) {
    Matrix& p = params.get(name);
    Matrix g = graw * factor;
    auto [mit, minserted] = m_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    auto [vit, vinserted] = v_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
    if (config_.weight_decay > 0) p *= 1.0 - config_.lr * config_.weight_decay;
    p.array() -= config_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config_.eps);
  }
}

}  // namespace ecpec
