#include "hypermvp/nn.hpp"

#include <cmath>

#include "hypermvp/error.hpp"

namespace hypermvp::nn {

std::size_t ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw Error("parameter '" + name + "' registered twice");
  names_.push_back(name);
  values_.push_back(std::move(value));
  index_[name] = names_.size() - 1;
  return names_.size() - 1;
}

std::size_t ParamStore::add_normal(const std::string& name, Shape shape, Rng& rng, double std) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.truncated_normal(std);
  return add(name, std::move(t));
}

std::size_t ParamStore::index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

std::size_t ParamStore::count_prefix(const std::string& prefix) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i].starts_with(prefix)) n += values_[i].size();
  return n;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& n : names_)
    if (n.starts_with(prefix)) out.push_back(n);
  return out;
}

Bound::Bound(const ParamStore& store, ad::Tape* tape) : store_(&store) {
  vars_.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    vars_.push_back(tape ? tape->leaf(store.value(i)) : Var(store.value(i)));
  }
}

Bound Bound::from_vars(const ParamStore& store, std::vector<Var> vars) {
  if (vars.size() != store.size()) throw ShapeError("Bound: expected one var per parameter");
  for (std::size_t i = 0; i < vars.size(); ++i) {
    if (vars[i].shape() != store.value(i).shape()) {
      throw ShapeError("Bound: parameter '" + store.name(i) + "' expects " + ad::to_string(store.value(i).shape()) +
                       ", got " + ad::to_string(vars[i].shape()));
    }
  }
  Bound b(store);
  b.vars_ = std::move(vars);
  return b;
}

void register_linear(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t in, std::size_t out) {
  ps.add_normal(prefix + ".w", {in, out}, rng);
  ps.add_zeros(prefix + ".b", {out});
}

Var linear(const Bound& p, const std::string& prefix, const Var& x) {
  return ad::broadcast_add(ad::matmul(x, p[prefix + ".w"]), p[prefix + ".b"]);
}

void register_layer_norm(ParamStore& ps, const std::string& prefix, std::size_t dim) {
  ps.add_ones(prefix + ".g", {dim});
  ps.add_zeros(prefix + ".b", {dim});
}

Var layer_norm(const Bound& p, const std::string& prefix, const Var& x) {
  return ad::layer_norm(x, p[prefix + ".g"], p[prefix + ".b"]);
}

void register_attention(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t dim) {
  for (const char* part : {".q", ".k", ".v", ".o"}) register_linear(ps, rng, prefix + part, dim, dim);
}

Var attention(const Bound& p, const std::string& prefix, const Var& q_in, const Var& kv_in, std::size_t heads) {
  const std::size_t dim = q_in.cols();
  if (heads == 0 || dim % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                     " heads");
  }
  const std::size_t dh = dim / heads;
  Var q = ad::scale(linear(p, prefix + ".q", q_in), 1.0 / std::sqrt(static_cast<double>(dh)));
  Var k = linear(p, prefix + ".k", kv_in);
  Var v = linear(p, prefix + ".v", kv_in);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    if (heads == 1) {
      outs.push_back(ad::matmul(ad::softmax_last(ad::matmul_nt(q, k)), v));
      break;
    }
    Var qh = ad::slice(q, 1, h * dh, (h + 1) * dh);
    Var kh = ad::slice(k, 1, h * dh, (h + 1) * dh);
    Var vh = ad::slice(v, 1, h * dh, (h + 1) * dh);
    outs.push_back(ad::matmul(ad::softmax_last(ad::matmul_nt(qh, kh)), vh));
  }
  Var merged = heads == 1 ? outs[0] : ad::concat(outs, 1);
  return linear(p, prefix + ".o", merged);
}

void register_mlp(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t dim, std::size_t hidden) {
  register_linear(ps, rng, prefix + ".fc1", dim, hidden);
  register_linear(ps, rng, prefix + ".fc2", hidden, dim);
}

Var mlp(const Bound& p, const std::string& prefix, const Var& x) {
  return linear(p, prefix + ".fc2", ad::gelu(linear(p, prefix + ".fc1", x)));
}

void register_block(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t dim, std::size_t hidden) {
  register_layer_norm(ps, prefix + ".ln1", dim);
  register_attention(ps, rng, prefix + ".attn", dim);
  register_layer_norm(ps, prefix + ".ln2", dim);
  register_mlp(ps, rng, prefix + ".mlp", dim, hidden);
}

Var block(const Bound& p, const std::string& prefix, const Var& x, std::size_t heads) {
  Var h = layer_norm(p, prefix + ".ln1", x);
  Var y = ad::add(x, attention(p, prefix + ".attn", h, h, heads));
  return ad::add(y, mlp(p, prefix + ".mlp", layer_norm(p, prefix + ".ln2", y)));
}

void register_cross_block(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t dim, std::size_t hidden) {
  register_layer_norm(ps, prefix + ".lnq", dim);
  register_layer_norm(ps, prefix + ".lnkv", dim);
  register_attention(ps, rng, prefix + ".attn", dim);
  register_layer_norm(ps, prefix + ".ln2", dim);
  register_mlp(ps, rng, prefix + ".mlp", dim, hidden);
}

Var cross_block(const Bound& p, const std::string& prefix, const Var& x, const Var& src, std::size_t heads) {
  Var q = layer_norm(p, prefix + ".lnq", x);
  Var kv = layer_norm(p, prefix + ".lnkv", src);
  Var y = ad::add(x, attention(p, prefix + ".attn", q, kv, heads));
  return ad::add(y, mlp(p, prefix + ".mlp", layer_norm(p, prefix + ".ln2", y)));
}

std::size_t linear_count(std::size_t in, std::size_t out) { return in * out + out; }

std::size_t block_count(std::size_t dim, std::size_t hidden) {
  return 2 * 2 * dim + 4 * linear_count(dim, dim) + linear_count(dim, hidden) + linear_count(hidden, dim);
}

std::size_t cross_block_count(std::size_t dim, std::size_t hidden) { return block_count(dim, hidden) + 2 * dim; }

}  // namespace hypermvp::nn
