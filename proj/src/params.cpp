#include "nxgpt/params.hpp"

#include <set>

#include "nxgpt/error.hpp"
#include "nxgpt/rng.hpp"

namespace nxgpt {

Mat round_to_float32(const Mat& m) {
  return m.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
}

std::string Parameter::module() const { return name.substr(0, name.find('.')); }

const Parameter& ParamStore::add(const std::string& name, Mat value, Role role) {
  if (contains(name)) throw Error(ErrorKind::kInvalidParameter, "duplicate parameter " + name);
  Parameter p;
  p.name = name;
  p.role = role;
  p.var = ag::leaf(nxgpt::round_to_float32(value), false);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return params_.back();
}

const Parameter& ParamStore::add_normal(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                                        double stddev, Role role, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return add(name, std::move(m), role);
}

const Parameter& ParamStore::add_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                                          double v, Role role) {
  return add(name, Mat::Constant(rows, cols, v), role);
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorKind::kShapeMismatch, "no parameter named " + name);
  return params_[it->second];
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.name);
  return out;
}

std::size_t ParamStore::count_scalars(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (std::string_view(p.name).starts_with(prefix)) n += static_cast<std::size_t>(p.value().size());
  }
  return n;
}

std::size_t ParamStore::count_scalars(Role role) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.role == role) n += static_cast<std::size_t>(p.value().size());
  }
  return n;
}

void ParamStore::set_trainable(const std::function<bool(const std::string&)>& pred) {
  for (auto& p : params_) p.var.node()->requires_grad = pred(p.name);
}

void ParamStore::set_trainable(const std::vector<std::string>& names) {
  std::set<std::string> s(names.begin(), names.end());
  set_trainable([&](const std::string& n) { return s.count(n) != 0; });
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& p : params_) {
    if (p.var.requires_grad()) out.push_back(p.name);
  }
  return out;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.var.node()->zero_grad();
}

void ParamStore::round_to_float32() {
  for (auto& p : params_) p.mutable_value() = nxgpt::round_to_float32(p.value());
}

}  // namespace nxgpt
