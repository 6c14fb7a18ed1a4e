#pragma once

// Named parameter storage and the transformer building blocks shared by the
// encoder and both decoders.

#include <map>
#include <string>
#include <vector>

#include "hypermvp/autodiff.hpp"
#include "hypermvp/random.hpp"

namespace hypermvp::nn {

using ad::Shape;
using ad::Tensor;
using ad::Var;

inline constexpr double kInitStd = 0.02;

// Ordered registry of learnable tensors. Insertion order fixes the checkpoint layout.
class ParamStore {
 public:
  std::size_t add(const std::string& name, Tensor value);
  std::size_t add_normal(const std::string& name, Shape shape, Rng& rng, double std = kInitStd);
  std::size_t add_zeros(const std::string& name, Shape shape) { return add(name, Tensor(std::move(shape), 0.0)); }
  std::size_t add_ones(const std::string& name, Shape shape) { return add(name, Tensor(std::move(shape), 1.0)); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index(const std::string& name) const;
  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  Tensor& value(const std::string& name) { return values_[index(name)]; }
  const Tensor& value(const std::string& name) const { return values_[index(name)]; }

  // Total learnable scalar count.
  std::size_t count() const;
  std::size_t count_prefix(const std::string& prefix) const;
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

// Parameters as Vars for one forward pass: tape leaves when training, constants otherwise.
class Bound {
 public:
  Bound(const ParamStore& store, ad::Tape* tape);
  // Caller-supplied vars, one per registered parameter in order.
  static Bound from_vars(const ParamStore& store, std::vector<Var> vars);
  const Var& operator[](const std::string& name) const { return vars_[store_->index(name)]; }
  const Var& at(std::size_t i) const { return vars_[i]; }
  const ParamStore& store() const { return *store_; }

 private:
  explicit Bound(const ParamStore& store) : store_(&store) {}
  const ParamStore* store_;
  std::vector<Var> vars_;
};

// ---- layers: each registers "<prefix>.<part>" names and reads them back ------

void register_linear(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t in, std::size_t out);
Var linear(const Bound& p, const std::string& prefix, const Var& x);

void register_layer_norm(ParamStore& ps, const std::string& prefix, std::size_t dim);
Var layer_norm(const Bound& p, const std::string& prefix, const Var& x);

void register_attention(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t dim);
// Multi-head attention: queries from q_in, keys/values from kv_in.
Var attention(const Bound& p, const std::string& prefix, const Var& q_in, const Var& kv_in, std::size_t heads);

void register_mlp(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t dim, std::size_t hidden);
Var mlp(const Bound& p, const std::string& prefix, const Var& x);

// Pre-norm self-attention block: x + attn(ln1 x); x + mlp(ln2 x).
void register_block(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t dim, std::size_t hidden);
Var block(const Bound& p, const std::string& prefix, const Var& x, std::size_t heads);

// Pre-norm cross-attention layer: x + attn(lnq x, lnkv src); x + mlp(ln2 x).
void register_cross_block(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t dim, std::size_t hidden);
Var cross_block(const Bound& p, const std::string& prefix, const Var& x, const Var& src, std::size_t heads);

// Closed-form scalar counts of the layers above.
std::size_t linear_count(std::size_t in, std::size_t out);
std::size_t block_count(std::size_t dim, std::size_t hidden);
std::size_t cross_block_count(std::size_t dim, std::size_t hidden);

}  // namespace hypermvp::nn
