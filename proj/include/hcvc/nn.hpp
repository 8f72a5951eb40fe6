#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hcvc/rng.hpp"
#include "hcvc/tensor.hpp"

namespace hcvc {

/// Named parameter registry. Construction order is the serialization and
/// optimization order, so it must be deterministic.
class ParamStore {
 public:
  struct Item {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  Tensor create(const std::string& name, int rows, int cols, RandomStream& rng);
  Tensor create_zeros(const std::string& name, int rows, int cols);
  Tensor create_full(const std::string& name, int rows, int cols, double value);
  void add_frozen(const std::string& name, Tensor t);

  const std::vector<Item>& items() const { return items_; }
  std::vector<Item>& items() { return items_; }
  const Tensor* find(const std::string& name) const;
  size_t trainable_count() const;

  void zero_grad();

 private:
  void push(const std::string& name, Tensor t, bool trainable);
  std::vector<Item> items_;
};

Tensor xavier_init(int rows, int cols, RandomStream& rng);

struct AttentionParams {
  Tensor w_q;  // d x d
  Tensor w_k;  // d_src x d
  Tensor w_v;  // d_src x d
  Tensor w_o;  // d x d
  int heads = 1;

  int model_width() const { return w_q.cols(); }
  int source_width() const { return w_k.rows(); }
};

AttentionParams make_attention_params(ParamStore& store, const std::string& prefix,
                                      int d_model, int d_src, int heads, RandomStream& rng);

/// Scaled dot-product attention with per-head projections. Self-attention is
/// multi_head_attention(x, x, x, p); cross-attention feeds external keys and
/// values. Output shape equals the query shape.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionParams& p);

struct FeedForwardParams {
  Tensor w1, b1;  // d x hidden, 1 x hidden
  Tensor w2, b2;  // hidden x d, 1 x d
};

FeedForwardParams make_feed_forward_params(ParamStore& store, const std::string& prefix,
                                           int d_model, int hidden, RandomStream& rng);

/// Two linear maps with a GELU between; output width equals input width.
Tensor feed_forward(const Tensor& x, const FeedForwardParams& p);

struct LayerNormParams {
  Tensor gain;  // 1 x d
  Tensor bias;  // 1 x d
};

LayerNormParams make_layer_norm_params(ParamStore& store, const std::string& prefix, int d);

Tensor layer_norm(const Tensor& x, const LayerNormParams& p);

}  // namespace hcvc
