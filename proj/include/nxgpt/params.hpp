#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nxgpt/autograd.hpp"
#include "nxgpt/config.hpp"

namespace nxgpt {

class Rng;

// Train mode enables stochastic pieces (Gumbel noise, dropout).
enum class Mode { kTrain, kEval };

struct Parameter {
  std::string name;
  Role role = Role::kFrozen;
  Var var;  // persistent leaf node

  const Mat& value() const { return var.value(); }
  Mat& mutable_value() const { return var.node()->value; }
  const Mat& grad() const { return var.grad(); }
  std::string module() const;  // first dotted component
};

// Named, insertion-ordered collection of model tensors. Values are kept
// representable in float32 (see round_to_float32) so checkpoints are exact.
class ParamStore {
 public:
  const Parameter& add(const std::string& name, Mat value, Role role);
  // Gaussian init with the given std, rounded to float32.
  const Parameter& add_normal(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev,
                              Role role, Rng& rng);
  const Parameter& add_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double v,
                                Role role);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Parameter& at(const std::string& name) const;
  Var get(const std::string& name) const { return at(name).var; }
  const Mat& value(const std::string& name) const { return at(name).value(); }

  const std::vector<Parameter>& params() const { return params_; }
  std::vector<std::string> names() const;
  std::size_t size() const { return params_.size(); }
  std::size_t count_scalars(std::string_view prefix = {}) const;
  std::size_t count_scalars(Role role) const;

  // Sets requires_grad on exactly the parameters accepted by pred.
  void set_trainable(const std::function<bool(const std::string&)>& pred);
  void set_trainable(const std::vector<std::string>& names);
  std::vector<std::string> trainable_names() const;
  void zero_grad();

  void round_to_float32();

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

Mat round_to_float32(const Mat& m);

}  // namespace nxgpt
