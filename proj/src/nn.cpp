#include "hcvc/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace hcvc {

void ParamStore::push(const std::string& name, Tensor t, bool trainable) {
  if (find(name) != nullptr) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  t.set_requires_grad(trainable);
  items_.push_back({name, std::move(t), trainable});
}

Tensor ParamStore::create(const std::string& name, int rows, int cols, RandomStream& rng) {
  push(name, xavier_init(rows, cols, rng), true);
  return items_.back().tensor;
}

Tensor ParamStore::create_zeros(const std::string& name, int rows, int cols) {
  push(name, Tensor::zeros(rows, cols), true);
  return items_.back().tensor;
}

Tensor ParamStore::create_full(const std::string& name, int rows, int cols, double value) {
  push(name, Tensor::full(rows, cols, value), true);
  return items_.back().tensor;
}

void ParamStore::add_frozen(const std::string& name, Tensor t) {
  push(name, std::move(t), false);
}

const Tensor* ParamStore::find(const std::string& name) const {
  for (const auto& it : items_) {
    if (it.name == name) return &it.tensor;
  }
  return nullptr;
}

size_t ParamStore::trainable_count() const {
  size_t n = 0;
  for (const auto& it : items_) n += it.trainable ? 1 : 0;
  return n;
}

void ParamStore::zero_grad() {
  for (auto& it : items_) it.tensor.zero_grad();
}

Tensor xavier_init(int rows, int cols, RandomStream& rng) {
  const double limit = std::sqrt(6.0 / (rows + cols));
  std::vector<double> data(static_cast<size_t>(rows) * cols);
  for (double& v : data) v = rng.next_range(-limit, limit);
  return Tensor::from_data(rows, cols, std::move(data));
}

AttentionParams make_attention_params(ParamStore& store, const std::string& prefix,
                                      int d_model, int d_src, int heads, RandomStream& rng) {
  if (heads < 1 || d_model % heads != 0) {
    throw std::invalid_argument("attention width " + std::to_string(d_model) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  AttentionParams p;
  p.w_q = store.create(prefix + ".w_q", d_model, d_model, rng);
  p.w_k = store.create(prefix + ".w_k", d_src, d_model, rng);
  p.w_v = store.create(prefix + ".w_v", d_src, d_model, rng);
  p.w_o = store.create(prefix + ".w_o", d_model, d_model, rng);
  p.heads = heads;
  return p;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionParams& p) {
  const int d = p.model_width();
  const int d_src = p.source_width();
  if (p.w_q.rows() != d || p.w_o.rows() != d || p.w_o.cols() != d || p.w_v.rows() != d_src ||
      p.w_k.cols() != d || p.w_v.cols() != d) {
    throw std::invalid_argument("multi_head_attention: inconsistent projection shapes");
  }
  if (q.cols() != d) {
    throw std::invalid_argument("multi_head_attention: query width " +
                                std::to_string(q.cols()) + " != " + std::to_string(d));
  }
  if (k.cols() != d_src || v.cols() != d_src) {
    throw std::invalid_argument("multi_head_attention: key/value width mismatch");
  }
  if (k.rows() != v.rows()) {
    throw std::invalid_argument("multi_head_attention: key and value row counts differ");
  }
  if (d % p.heads != 0) {
    throw std::invalid_argument("multi_head_attention: width not divisible by head count");
  }

  const Tensor qp = matmul(q, p.w_q);
  const Tensor kp = matmul(k, p.w_k);
  const Tensor vp = matmul(v, p.w_v);

  const int dh = d / p.heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(p.heads);
  for (int h = 0; h < p.heads; ++h) {
    const Tensor qh = slice_cols(qp, h * dh, dh);
    const Tensor kh = slice_cols(kp, h * dh, dh);
    const Tensor vh = slice_cols(vp, h * dh, dh);
    const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
    const Tensor attn = softmax_rows(scores);
    head_outputs.push_back(matmul(attn, vh));
  }
  const Tensor merged = concat_cols(head_outputs);
  return matmul(merged, p.w_o);
}

FeedForwardParams make_feed_forward_params(ParamStore& store, const std::string& prefix,
                                           int d_model, int hidden, RandomStream& rng) {
  FeedForwardParams p;
  p.w1 = store.create(prefix + ".w1", d_model, hidden, rng);
  p.b1 = store.create_zeros(prefix + ".b1", 1, hidden);
  p.w2 = store.create(prefix + ".w2", hidden, d_model, rng);
  p.b2 = store.create_zeros(prefix + ".b2", 1, d_model);
  return p;
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  const Tensor h = gelu(add_row_broadcast(matmul(x, p.w1), p.b1));
  return add_row_broadcast(matmul(h, p.w2), p.b2);
}

LayerNormParams make_layer_norm_params(ParamStore& store, const std::string& prefix, int d) {
  LayerNormParams p;
  p.gain = store.create_full(prefix + ".gain", 1, d, 1.0);
  p.bias = store.create_zeros(prefix + ".bias", 1, d);
  return p;
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  return layer_norm_rows(x, p.gain, p.bias);
}

}  // namespace hcvc
