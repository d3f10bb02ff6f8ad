#pragma once

// Layer building blocks shared by the grouping projector, the LLM and the
// output projections. Parameters live in a ParamStore under a name prefix;
// the functions here only register and read them.

#include <string>
#include <vector>

#include "nxgpt/autograd.hpp"
#include "nxgpt/params.hpp"

namespace nxgpt {
class Rng;
}

namespace nxgpt::nn {

void add_linear(ParamStore& store, const std::string& prefix, int in, int out, Role role, Rng& rng,
                double stddev = -1.0, bool bias = true);
// x W (+ b) with W: in x out.
Var linear(const ParamStore& store, const std::string& prefix, const Var& x);

void add_layer_norm(ParamStore& store, const std::string& prefix, int dim, Role role);
Var layer_norm(const ParamStore& store, const std::string& prefix, const Var& x);

// Low-rank adapters on attention projections: delta = scale * B A with
// A: rank x d_in (Gaussian) and B: d_out x rank (zero), named
// "<prefix>.<target>.a" / ".b".
struct LoraSpec {
  std::string prefix;
  std::vector<std::string> targets;
  double scale = 0.0;
  bool enabled = true;

  bool targets_projection(const std::string& proj) const;
};

void add_lora(ParamStore& store, const LoraSpec& spec, int dim, int rank, Role role, Rng& rng);

// x W (+ b) plus the LoRA delta when `which` is one of the adapter targets.
Var projection(const ParamStore& store, const std::string& prefix, const std::string& which, const Var& x,
               const LoraSpec* lora);

void add_attention(ParamStore& store, const std::string& prefix, int dim, Role role, Rng& rng);
// Multi-head attention with queries from xq and keys/values from xkv.
Var attention(const ParamStore& store, const std::string& prefix, const Var& xq, const Var& xkv, int heads,
              bool causal, const LoraSpec* lora = nullptr);

// Keys and values of the positions already processed, for incremental
// decoding without gradients.
struct KvCache {
  Mat k;
  Mat v;
};

// Causal self-attention of new rows x against the cache plus themselves;
// appends their keys and values to the cache.
Var cached_attention(const ParamStore& store, const std::string& prefix, const Var& x, KvCache& cache, int heads,
                     const LoraSpec* lora = nullptr);

void add_mlp(ParamStore& store, const std::string& prefix, int dim, int hidden, int out, Role role, Rng& rng);
// fc2(gelu(fc1(x)))
Var mlp(const ParamStore& store, const std::string& prefix, const Var& x);

struct BlockOptions {
  int heads = 1;
  bool causal = false;
  const LoraSpec* lora = nullptr;
  double dropout = 0.0;
  Rng* rng = nullptr;  // required when dropout > 0
};

// Pre-LN transformer block: x + attn(ln1(x)), then + mlp(ln2(x)).
void add_block(ParamStore& store, const std::string& prefix, int dim, int ffn_hidden, Role role, Rng& rng);
Var block(const ParamStore& store, const std::string& prefix, const Var& x, const BlockOptions& opt);

// block() for causal self-attention over cached positions (no dropout).
Var cached_block(const ParamStore& store, const std::string& prefix, const Var& x, KvCache& cache,
                 const BlockOptions& opt);

// Decoder block with cross-attention to memory:
// x + self_attn(ln1 x); x + cross_attn(ln2 x, memory); x + mlp(ln3 x).
void add_decoder_block(ParamStore& store, const std::string& prefix, int dim, int ffn_hidden, Role role, Rng& rng);
Var decoder_block(const ParamStore& store, const std::string& prefix, const Var& x, const Var& memory,
                  const BlockOptions& opt);

}  // namespace nxgpt::nn
