#include "nxgpt/nn.hpp"

#include <algorithm>
#include <cmath>

#include "nxgpt/error.hpp"
#include "nxgpt/rng.hpp"

namespace nxgpt::nn {

void add_linear(ParamStore& store, const std::string& prefix, int in, int out, Role role, Rng& rng,
                double stddev, bool bias) {
  if (stddev < 0) stddev = 1.0 / std::sqrt(static_cast<double>(in));
  store.add_normal(prefix + ".w", in, out, stddev, role, rng);
  if (bias) store.add_constant(prefix + ".b", 1, out, 0.0, role);
}

Var linear(const ParamStore& store, const std::string& prefix, const Var& x) {
  Var y = ag::matmul(x, store.get(prefix + ".w"));
  const std::string b = prefix + ".b";
  return store.contains(b) ? ag::add_row(y, store.get(b)) : y;
}

void add_layer_norm(ParamStore& store, const std::string& prefix, int dim, Role role) {
  store.add_constant(prefix + ".g", 1, dim, 1.0, role);
  store.add_constant(prefix + ".b", 1, dim, 0.0, role);
}

Var layer_norm(const ParamStore& store, const std::string& prefix, const Var& x) {
  return ag::layer_norm(x, store.get(prefix + ".g"), store.get(prefix + ".b"));
}

bool LoraSpec::targets_projection(const std::string& proj) const {
  return enabled && std::find(targets.begin(), targets.end(), proj) != targets.end();
}

void add_lora(ParamStore& store, const LoraSpec& spec, int dim, int rank, Role role, Rng& rng) {
  for (const auto& t : spec.targets) {
    store.add_normal(spec.prefix + "." + t + ".a", rank, dim, 1.0 / std::sqrt(static_cast<double>(dim)), role, rng);
    store.add_constant(spec.prefix + "." + t + ".b", dim, rank, 0.0, role);
  }
}

void add_attention(ParamStore& store, const std::string& prefix, int dim, Role role, Rng& rng) {
  for (const char* p : {"q", "k", "v", "o"}) add_linear(store, prefix + "." + p, dim, dim, role, rng);
}

Var projection(const ParamStore& store, const std::string& prefix, const std::string& which, const Var& x,
               const LoraSpec* lora) {
  Var y = linear(store, prefix + "." + which, x);
  if (lora && lora->targets_projection(which)) {
    const std::string base = lora->prefix + "." + which;
    Var low = ag::matmul_nt(x, store.get(base + ".a"));
    Var delta = ag::matmul_nt(low, store.get(base + ".b"));
    y = ag::add(y, ag::scale(delta, lora->scale));
  }
  return y;
}

namespace {

Var heads_attend(const Var& q, const Var& k, const Var& v, int heads, bool causal) {
  const Eigen::Index dim = q.cols();
  if (dim % heads != 0) throw Error(ErrorKind::kShapeMismatch, "attention: dim not divisible by heads");
  const Eigen::Index hd = dim / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : ag::slice_cols(q, h * hd, hd);
    Var kh = heads == 1 ? k : ag::slice_cols(k, h * hd, hd);
    Var vh = heads == 1 ? v : ag::slice_cols(v, h * hd, hd);
    Var probs = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv), causal);
    outs.push_back(ag::matmul(probs, vh));
  }
  return heads == 1 ? outs[0] : ag::concat_cols(outs);
}

Mat append_rows(const Mat& top, const Mat& bottom) {
  if (top.rows() == 0) return bottom;
  Mat out(top.rows() + bottom.rows(), bottom.cols());
  out << top, bottom;
  return out;
}

}  // namespace

Var attention(const ParamStore& store, const std::string& prefix, const Var& xq, const Var& xkv, int heads,
              bool causal, const LoraSpec* lora) {
  Var q = projection(store, prefix, "q", xq, lora);
  Var k = projection(store, prefix, "k", xkv, lora);
  Var v = projection(store, prefix, "v", xkv, lora);
  return projection(store, prefix, "o", heads_attend(q, k, v, heads, causal), lora);
}

Var cached_attention(const ParamStore& store, const std::string& prefix, const Var& x, KvCache& cache, int heads,
                     const LoraSpec* lora) {
  Var q = projection(store, prefix, "q", x, lora);
  cache.k = append_rows(cache.k, projection(store, prefix, "k", x, lora).value());
  cache.v = append_rows(cache.v, projection(store, prefix, "v", x, lora).value());
  // The causal mask is offset by the cached length, so new rows see the past.
  Var merged = heads_attend(q, ag::constant(cache.k), ag::constant(cache.v), heads, true);
  return projection(store, prefix, "o", merged, lora);
}

void add_mlp(ParamStore& store, const std::string& prefix, int dim, int hidden, int out, Role role, Rng& rng) {
  add_linear(store, prefix + ".fc1", dim, hidden, role, rng);
  add_linear(store, prefix + ".fc2", hidden, out, role, rng);
}

Var mlp(const ParamStore& store, const std::string& prefix, const Var& x) {
  return linear(store, prefix + ".fc2", ag::gelu(linear(store, prefix + ".fc1", x)));
}

namespace {

Var maybe_dropout(const Var& x, const BlockOptions& opt) {
  if (opt.dropout <= 0.0) return x;
  if (!opt.rng) throw Error(ErrorKind::kInvalidParameter, "dropout requires an rng");
  return ag::dropout(x, opt.dropout, *opt.rng);
}

}  // namespace

void add_block(ParamStore& store, const std::string& prefix, int dim, int ffn_hidden, Role role, Rng& rng) {
  add_layer_norm(store, prefix + ".ln1", dim, role);
  add_attention(store, prefix + ".attn", dim, role, rng);
  add_layer_norm(store, prefix + ".ln2", dim, role);
  add_mlp(store, prefix + ".mlp", dim, ffn_hidden, dim, role, rng);
}

Var cached_block(const ParamStore& store, const std::string& prefix, const Var& x, KvCache& cache,
                 const BlockOptions& opt) {
  Var h = layer_norm(store, prefix + ".ln1", x);
  Var x1 = ag::add(x, cached_attention(store, prefix + ".attn", h, cache, opt.heads, opt.lora));
  return ag::add(x1, mlp(store, prefix + ".mlp", layer_norm(store, prefix + ".ln2", x1)));
}

Var block(const ParamStore& store, const std::string& prefix, const Var& x, const BlockOptions& opt) {
  Var h = layer_norm(store, prefix + ".ln1", x);
  Var a = attention(store, prefix + ".attn", h, h, opt.heads, opt.causal, opt.lora);
  Var x1 = ag::add(x, maybe_dropout(a, opt));
  Var m = mlp(store, prefix + ".mlp", layer_norm(store, prefix + ".ln2", x1));
  return ag::add(x1, maybe_dropout(m, opt));
}

void add_decoder_block(ParamStore& store, const std::string& prefix, int dim, int ffn_hidden, Role role,
                       Rng& rng) {
  add_layer_norm(store, prefix + ".ln1", dim, role);
  add_attention(store, prefix + ".self", dim, role, rng);
  add_layer_norm(store, prefix + ".ln2", dim, role);
  add_attention(store, prefix + ".cross", dim, role, rng);
  add_layer_norm(store, prefix + ".ln3", dim, role);
  add_mlp(store, prefix + ".mlp", dim, ffn_hidden, dim, role, rng);
}

Var decoder_block(const ParamStore& store, const std::string& prefix, const Var& x, const Var& memory,
                  const BlockOptions& opt) {
  Var h = layer_norm(store, prefix + ".ln1", x);
  Var x1 = ag::add(x, maybe_dropout(attention(store, prefix + ".self", h, h, opt.heads, false), opt));
  Var h2 = layer_norm(store, prefix + ".ln2", x1);
  Var x2 = ag::add(x1, maybe_dropout(attention(store, prefix + ".cross", h2, memory, opt.heads, false), opt));
  Var m = mlp(store, prefix + ".mlp", layer_norm(store, prefix + ".ln3", x2));
  return ag::add(x2, maybe_dropout(m, opt));
}

}  // namespace nxgpt::nn
