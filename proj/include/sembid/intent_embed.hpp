#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sembid/ingest.hpp"
#include "sembid/tokenize.hpp"

namespace sembid {

using Matrix = Eigen::MatrixXd;
using Embedding = std::vector<double>;

struct NetShape {
  int layers = 2;    // transformer blocks
  int heads = 4;     // attention heads; must divide d_model
  int d_model = 32;
  int d_ff = 0;      // feed-forward width, 0 -> 4 * d_model
  int d_hidden = 0;  // first head layer width, 0 -> max(d_model, d_out)
  int d_out = 32;

  int ff_width() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  int hidden_width() const { return d_hidden > 0 ? d_hidden : std::max(d_model, d_out); }
  void validate() const;
  bool operator==(const NetShape&) const = default;
};

// How pairs labelled im = -1 enter the loss. AsWritten keeps -im * log
// sigmoid(dot), i.e. +log sigmoid(dot); that term is concave in the dot
// product and, trained long enough, pushes unrelated intentions onto two
// antipodal poles. Logistic uses -log sigmoid(-dot) for those pairs, which
// is convex and stops pushing once the pair is dissimilar.
enum class NegativeTerm { AsWritten, Logistic };
const char* to_string(NegativeTerm term);
NegativeTerm parse_negative_term(const std::string& name);

struct TrainConfig {
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 32;
  int epochs = 10;
  std::uint64_t seed = 1;
  NetShape shape;
  NegativeTerm negative_term = NegativeTerm::AsWritten;

  void validate() const;
  // Three blocks and a 512-dimensional output, as deployed in production.
  static TrainConfig production_scale();
};

struct TransformerBlock {
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  Matrix ln1_gain, ln1_bias;
  Matrix w1, b1, w2, b2;
  Matrix ln2_gain, ln2_bias;
};

// All trainable tensors. Row-vector convention: activations are (tokens x
// features) and layers compute X * W + b.
struct NetParams {
  Matrix token_embedding;     // |V| x d_model
  Matrix position_embedding;  // L x d_model
  std::vector<TransformerBlock> blocks;
  Matrix pool_w, pool_b;      // dense pooling layer
  Matrix head1_w, head1_b;
  Matrix head2_w, head2_b;

  // Visits every tensor in a fixed order with a stable name.
  template <class F>
  void for_each(F&& f) {
    f("token_embedding", token_embedding);
    f("position_embedding", position_embedding);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      const std::string p = "block" + std::to_string(i) + ".";
      f(p + "wq", b.wq); f(p + "bq", b.bq);
      f(p + "wk", b.wk); f(p + "bk", b.bk);
      f(p + "wv", b.wv); f(p + "bv", b.bv);
      f(p + "wo", b.wo); f(p + "bo", b.bo);
      f(p + "ln1_gain", b.ln1_gain); f(p + "ln1_bias", b.ln1_bias);
      f(p + "w1", b.w1); f(p + "b1", b.b1);
      f(p + "w2", b.w2); f(p + "b2", b.b2);
      f(p + "ln2_gain", b.ln2_gain); f(p + "ln2_bias", b.ln2_bias);
    }
    f("pool_w", pool_w); f("pool_b", pool_b);
    f("head1_w", head1_w); f("head1_b", head1_b);
    f("head2_w", head2_w); f("head2_b", head2_b);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<NetParams*>(this)->for_each([&](const std::string& n, Matrix& m) { f(n, static_cast<const Matrix&>(m)); });
  }

  NetParams zeros_like() const;
  void set_zero();
  std::size_t size() const;
};

// Customer-intention encoder: token + learned position embeddings, post-norm
// transformer blocks, masked mean pooling into a tanh dense layer, two
// feed-forward layers and a final L2 normalization.
class EmbeddingNet {
 public:
  EmbeddingNet(std::size_t vocab_size, std::size_t seq_len, NetShape shape, std::uint64_t seed,
               std::uint64_t vocab_hash = 0);

  Embedding forward(const TokenSequence& tokens) const;

  // Forward then back-propagates d_loss/d_output into grads (accumulating).
  // Returns the output embedding.
  Embedding forward_backward(const TokenSequence& tokens, std::span<const double> d_output, NetParams& grads) const;

  const NetParams& params() const { return params_; }
  NetParams& params() { return params_; }
  const NetShape& shape() const { return shape_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t seq_len() const { return seq_len_; }
  std::uint64_t vocab_hash() const { return vocab_hash_; }
  std::size_t parameter_count() const { return params_.size(); }

  std::string serialize() const;
  static EmbeddingNet deserialize(const std::string& text, const std::string& source = "<checkpoint>");
  void save(const std::string& path) const;
  static EmbeddingNet load(const std::string& path);

 private:
  EmbeddingNet() = default;
  void check_tokens(const TokenSequence& tokens) const;

  std::size_t vocab_size_ = 0;
  std::size_t seq_len_ = 0;
  NetShape shape_;
  std::uint64_t vocab_hash_ = 0;
  NetParams params_;
};

// -im * log(sigmoid(dot)).
double pair_loss(double im, double dot);
// d pair_loss / d dot = -im * (1 - sigmoid(dot)).
double pair_loss_grad(double im, double dot);
// Same for im >= 0; negatives follow `term`.
double pair_loss(double im, double dot, NegativeTerm term);
double pair_loss_grad(double im, double dot, NegativeTerm term);

// Loss of one pair; accumulates its parameter gradient when grads != nullptr.
double pair_loss_and_grad(const EmbeddingNet& net, const TokenSequence& a, const TokenSequence& b, double im,
                          NetParams* grads, NegativeTerm term = NegativeTerm::AsWritten);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  double max_abs_gradient = 0.0;
};

// Central finite differences against the analytic gradient on a seeded
// random subset of coordinates (token-embedding rows restricted to tokens
// that occur in the pair). Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const EmbeddingNet& net, const TokenSequence& a, const TokenSequence& b, double im,
                           double epsilon, std::size_t n_coordinates = 128, std::uint64_t seed = 0,
                           double floor = 1e-8);

class AdamOptimizer {
 public:
  AdamOptimizer(const NetParams& like, const TrainConfig& cfg);
  void step(NetParams& params, const NetParams& grads);
  long long steps() const { return t_; }

 private:
  TrainConfig cfg_;
  NetParams m_, v_;
  long long t_ = 0;
};

struct TrainResult {
  EmbeddingNet net;
  std::vector<double> loss_curve;  // mean pair loss over all pairs after each epoch
};

// Minimizes the mean pair loss with ADAM over seeded shuffled mini-batches.
TrainResult train_embedding(EmbeddingNet init, std::span<const AdPair> pairs,
                            const std::map<std::string, TokenSequence>& tokens, const TrainConfig& cfg);
TrainResult train_embedding(std::span<const AdPair> pairs, const std::map<std::string, TokenSequence>& tokens,
                            const TrainConfig& cfg, std::size_t vocab_size, std::uint64_t vocab_hash = 0);

double mean_pair_loss(const EmbeddingNet& net, std::span<const AdPair> pairs,
                      const std::map<std::string, TokenSequence>& tokens,
                      NegativeTerm term = NegativeTerm::AsWritten);

std::map<std::string, Embedding> embed_catalog(const EmbeddingNet& net, std::span<const Ad> ads,
                                               const Vocabulary& vocab, int threads = 1);

void write_embeddings(const std::string& path, const std::map<std::string, Embedding>& embeddings);
std::map<std::string, Embedding> read_embeddings(const std::string& path);

double dot(std::span<const double> a, std::span<const double> b);

}  // namespace sembid
