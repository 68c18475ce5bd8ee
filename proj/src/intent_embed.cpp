#include "sembid/intent_embed.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <sstream>
#include <thread>

#include "sembid/csv.hpp"
#include "sembid/error.hpp"
#include "sembid/random.hpp"

namespace sembid {

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
constexpr const char* kCheckpointMagic = "sembid-embedding-net";
constexpr int kCheckpointVersion = 1;

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  // Column-major fill order is part of the seeded contract.
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = (2.0 * uniform01(rng) - 1.0) * bound;
  }
  return m;
}

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd inv_std;
};

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  cache.xhat.resize(n, d);
  cache.inv_std.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(r) = inv;
    cache.xhat.row(r) = (x.row(r).array() - mu) * inv;
  }
  Matrix y = cache.xhat.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  return y;
}

// Returns d_x; accumulates d_gain and d_bias.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache, Matrix& d_gain,
                           Matrix& d_bias) {
  const auto d = static_cast<double>(dy.cols());
  d_gain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  d_bias.row(0) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double s1 = dxhat.row(r).sum();
    const double s2 = dxhat.row(r).dot(cache.xhat.row(r));
    dx.row(r) = (cache.inv_std(r) / d) * (d * dxhat.row(r).array() - s1 - cache.xhat.row(r).array() * s2).matrix();
  }
  return dx;
}

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
}

struct BlockCache {
  Matrix x;  // block input
  Matrix q, k, v;
  std::vector<Matrix> probs;  // one n x n matrix per head
  Matrix ctx;
  LayerNormCache ln1;
  Matrix h1;
  Matrix ff_pre, ff_act;
  LayerNormCache ln2;
};

struct ForwardCache {
  std::vector<std::int32_t> ids;  // positions actually encoded
  std::vector<BlockCache> blocks;
  Matrix final_x;
  Matrix pooled_mean, pool_act, head1_pre, head1_act, y;
  double y_norm = 0.0;
  Matrix out;
};

std::vector<std::int32_t> encoded_ids(const TokenSequence& tokens) {
  const std::size_t n = tokens.content_length();
  // An all-pad sequence is encoded in full so that pooling stays defined.
  if (n == 0) return tokens.ids;
  return {tokens.ids.begin(), tokens.ids.begin() + static_cast<std::ptrdiff_t>(n)};
}

void run_forward(const NetParams& p, const NetShape& shape, const TokenSequence& tokens, ForwardCache& c) {
  c.ids = encoded_ids(tokens);
  const auto n = static_cast<Eigen::Index>(c.ids.size());
  const auto d = static_cast<Eigen::Index>(shape.d_model);
  const auto dk = d / shape.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  Matrix x(n, d);
  for (Eigen::Index t = 0; t < n; ++t) {
    x.row(t) = p.token_embedding.row(c.ids[static_cast<std::size_t>(t)]) + p.position_embedding.row(t);
  }
  c.blocks.resize(p.blocks.size());
  for (std::size_t li = 0; li < p.blocks.size(); ++li) {
    const auto& b = p.blocks[li];
    auto& bc = c.blocks[li];
    bc.x = x;
    bc.q = affine(x, b.wq, b.bq);
    bc.k = affine(x, b.wk, b.bk);
    bc.v = affine(x, b.wv, b.bv);
    bc.ctx.resize(n, d);
    bc.probs.resize(static_cast<std::size_t>(shape.heads));
    for (int h = 0; h < shape.heads; ++h) {
      const auto off = h * dk;
      Matrix s = (bc.q.middleCols(off, dk) * bc.k.middleCols(off, dk).transpose()) * scale;
      softmax_rows(s);
      bc.ctx.middleCols(off, dk) = s * bc.v.middleCols(off, dk);
      bc.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    const Matrix r1 = x + affine(bc.ctx, b.wo, b.bo);
    bc.h1 = layer_norm(r1, b.ln1_gain, b.ln1_bias, bc.ln1);
    bc.ff_pre = affine(bc.h1, b.w1, b.b1);
    bc.ff_act = bc.ff_pre.unaryExpr(&gelu);
    const Matrix r2 = bc.h1 + affine(bc.ff_act, b.w2, b.b2);
    x = layer_norm(r2, b.ln2_gain, b.ln2_bias, bc.ln2);
  }
  c.final_x = x;
  c.pooled_mean = x.colwise().mean();
  c.pool_act = affine(c.pooled_mean, p.pool_w, p.pool_b).array().tanh().matrix();
  c.head1_pre = affine(c.pool_act, p.head1_w, p.head1_b);
  c.head1_act = c.head1_pre.unaryExpr(&gelu);
  c.y = affine(c.head1_act, p.head2_w, p.head2_b);
  c.y_norm = c.y.norm();
  if (c.y_norm > 0.0 && std::isfinite(c.y_norm)) {
    c.out = c.y / c.y_norm;
  } else {
    c.out = Matrix::Zero(1, c.y.cols());
    c.out(0, 0) = 1.0;
  }
}

void run_backward(const NetParams& p, const NetShape& shape, const ForwardCache& c, const Matrix& d_out,
                  NetParams& g) {
  const auto n = static_cast<Eigen::Index>(c.ids.size());
  const auto d = static_cast<Eigen::Index>(shape.d_model);
  const auto dk = d / shape.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  if (!(c.y_norm > 0.0) || !std::isfinite(c.y_norm)) return;  // constant output branch

  const Matrix dy = (d_out - d_out.cwiseProduct(c.out).sum() * c.out) / c.y_norm;
  g.head2_w += c.head1_act.transpose() * dy;
  g.head2_b += dy;
  const Matrix dz1 = (dy * p.head2_w.transpose()).cwiseProduct(c.head1_pre.unaryExpr(&gelu_grad));
  g.head1_w += c.pool_act.transpose() * dz1;
  g.head1_b += dz1;
  const Matrix dzp = (dz1 * p.head1_w.transpose()).array() * (1.0 - c.pool_act.array().square());
  g.pool_w += c.pooled_mean.transpose() * dzp;
  g.pool_b += dzp;
  const Matrix dm = dzp * p.pool_w.transpose();

  Matrix dx = dm.replicate(n, 1) / static_cast<double>(n);
  for (std::size_t li = p.blocks.size(); li-- > 0;) {
    const auto& b = p.blocks[li];
    const auto& bc = c.blocks[li];
    auto& gb = g.blocks[li];

    const Matrix dr2 = layer_norm_backward(dx, b.ln2_gain, bc.ln2, gb.ln2_gain, gb.ln2_bias);
    gb.w2 += bc.ff_act.transpose() * dr2;
    gb.b2.row(0) += dr2.colwise().sum();
    const Matrix dff = (dr2 * b.w2.transpose()).cwiseProduct(bc.ff_pre.unaryExpr(&gelu_grad));
    gb.w1 += bc.h1.transpose() * dff;
    gb.b1.row(0) += dff.colwise().sum();
    const Matrix dh1 = dr2 + dff * b.w1.transpose();

    const Matrix dr1 = layer_norm_backward(dh1, b.ln1_gain, bc.ln1, gb.ln1_gain, gb.ln1_bias);
    gb.wo += bc.ctx.transpose() * dr1;
    gb.bo.row(0) += dr1.colwise().sum();
    const Matrix dctx = dr1 * b.wo.transpose();

    Matrix dq(n, d), dkm(n, d), dv(n, d);
    for (int h = 0; h < shape.heads; ++h) {
      const auto off = h * dk;
      const Matrix& prob = bc.probs[static_cast<std::size_t>(h)];
      const auto dc = dctx.middleCols(off, dk);
      const Matrix dp = dc * bc.v.middleCols(off, dk).transpose();
      dv.middleCols(off, dk) = prob.transpose() * dc;
      Matrix ds = prob.cwiseProduct(dp);
      const Eigen::VectorXd rows = ds.rowwise().sum();
      ds -= prob.cwiseProduct(rows.replicate(1, n));
      ds *= scale;
      dq.middleCols(off, dk) = ds * bc.k.middleCols(off, dk);
      dkm.middleCols(off, dk) = ds.transpose() * bc.q.middleCols(off, dk);
    }
    gb.wq += bc.x.transpose() * dq;
    gb.bq.row(0) += dq.colwise().sum();
    gb.wk += bc.x.transpose() * dkm;
    gb.bk.row(0) += dkm.colwise().sum();
    gb.wv += bc.x.transpose() * dv;
    gb.bv.row(0) += dv.colwise().sum();
    dx = dr1 + dq * b.wq.transpose() + dkm * b.wk.transpose() + dv * b.wv.transpose();
  }
  for (Eigen::Index t = 0; t < n; ++t) {
    g.token_embedding.row(c.ids[static_cast<std::size_t>(t)]) += dx.row(t);
    g.position_embedding.row(t) += dx.row(t);
  }
}

Embedding to_embedding(const Matrix& row) { return Embedding(row.data(), row.data() + row.size()); }

double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

std::string hex_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

}  // namespace

void NetShape::validate() const {
  if (layers < 1 || heads < 1 || d_model < 1 || d_out < 1 || d_ff < 0 || d_hidden < 0) {
    throw Error("network shape entries must be positive");
  }
  if (d_model % heads != 0) throw Error("d_model must be divisible by the head count");
}

void TrainConfig::validate() const {
  shape.validate();
  if (!(learning_rate >= 0.0)) throw Error("learning_rate must be non-negative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw Error("ADAM betas must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) throw Error("adam_epsilon must be positive");
  if (batch_size < 1 || epochs < 0) throw Error("batch_size must be positive and epochs non-negative");
}

TrainConfig TrainConfig::production_scale() {
  TrainConfig cfg;
  cfg.shape.layers = 3;
  cfg.shape.heads = 8;
  cfg.shape.d_model = 512;
  cfg.shape.d_out = 512;
  return cfg;
}

NetParams NetParams::zeros_like() const {
  NetParams z = *this;
  z.set_zero();
  return z;
}

void NetParams::set_zero() {
  for_each([](const std::string&, Matrix& m) { m.setZero(); });
}

std::size_t NetParams::size() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

EmbeddingNet::EmbeddingNet(std::size_t vocab_size, std::size_t seq_len, NetShape shape, std::uint64_t seed,
                           std::uint64_t vocab_hash)
    : vocab_size_(vocab_size), seq_len_(seq_len), shape_(shape), vocab_hash_(vocab_hash) {
  shape_.validate();
  if (vocab_size < 2) throw Error("vocabulary must hold at least pad and unk");
  if (seq_len < 1) throw Error("sequence length must be positive");
  Rng rng = make_rng(seed, "embed.init");
  const auto V = static_cast<Eigen::Index>(vocab_size);
  const auto L = static_cast<Eigen::Index>(seq_len);
  const auto d = static_cast<Eigen::Index>(shape_.d_model);
  const auto f = static_cast<Eigen::Index>(shape_.ff_width());
  const auto h = static_cast<Eigen::Index>(shape_.hidden_width());
  const auto o = static_cast<Eigen::Index>(shape_.d_out);
  auto dense = [&](Eigen::Index in, Eigen::Index out, Matrix& w, Matrix& b) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    w = uniform_matrix(in, out, bound, rng);
    b = uniform_matrix(1, out, bound, rng);
  };
  const double emb_bound = 1.0 / std::sqrt(static_cast<double>(d));
  params_.token_embedding = uniform_matrix(V, d, emb_bound, rng);
  params_.position_embedding = uniform_matrix(L, d, emb_bound, rng);
  params_.blocks.resize(static_cast<std::size_t>(shape_.layers));
  for (auto& b : params_.blocks) {
    dense(d, d, b.wq, b.bq);
    dense(d, d, b.wk, b.bk);
    dense(d, d, b.wv, b.bv);
    dense(d, d, b.wo, b.bo);
    b.ln1_gain = Matrix::Ones(1, d);
    b.ln1_bias = Matrix::Zero(1, d);
    dense(d, f, b.w1, b.b1);
    dense(f, d, b.w2, b.b2);
    b.ln2_gain = Matrix::Ones(1, d);
    b.ln2_bias = Matrix::Zero(1, d);
  }
  dense(d, d, params_.pool_w, params_.pool_b);
  dense(d, h, params_.head1_w, params_.head1_b);
  dense(h, o, params_.head2_w, params_.head2_b);
}

void EmbeddingNet::check_tokens(const TokenSequence& tokens) const {
  if (tokens.ids.size() != seq_len_) {
    throw Error("token sequence length " + std::to_string(tokens.ids.size()) + " != network length " +
                std::to_string(seq_len_));
  }
  for (auto id : tokens.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) {
      throw Error("token id " + std::to_string(id) + " out of range for vocabulary size " +
                  std::to_string(vocab_size_));
    }
  }
}

Embedding EmbeddingNet::forward(const TokenSequence& tokens) const {
  check_tokens(tokens);
  ForwardCache c;
  run_forward(params_, shape_, tokens, c);
  return to_embedding(c.out);
}

Embedding EmbeddingNet::forward_backward(const TokenSequence& tokens, std::span<const double> d_output,
                                         NetParams& grads) const {
  check_tokens(tokens);
  if (d_output.size() != static_cast<std::size_t>(shape_.d_out)) throw Error("output gradient has wrong size");
  ForwardCache c;
  run_forward(params_, shape_, tokens, c);
  const Matrix d_out = Eigen::Map<const Matrix>(d_output.data(), 1, static_cast<Eigen::Index>(d_output.size()));
  run_backward(params_, shape_, c, d_out, grads);
  return to_embedding(c.out);
}

std::string EmbeddingNet::serialize() const {
  std::ostringstream out;
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  out << "vocab_size " << vocab_size_ << '\n';
  out << "seq_len " << seq_len_ << '\n';
  out << "layers " << shape_.layers << '\n';
  out << "heads " << shape_.heads << '\n';
  out << "d_model " << shape_.d_model << '\n';
  out << "d_ff " << shape_.ff_width() << '\n';
  out << "d_hidden " << shape_.hidden_width() << '\n';
  out << "d_out " << shape_.d_out << '\n';
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(vocab_hash_));
  out << "vocab_hash " << hash << '\n';
  params_.for_each([&](const std::string& name, const Matrix& m) {
    out << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index col = 0; col < m.cols(); ++col) {
        if (col) out << ' ';
        out << hex_double(m(r, col));
      }
      out << '\n';
    }
  });
  out << "end\n";
  return out.str();
}

EmbeddingNet EmbeddingNet::deserialize(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  auto fail = [&](const std::string& what) -> Error { return Error(source + ": " + what); };
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != kCheckpointMagic) throw fail("not an embedding checkpoint");
  if (version != kCheckpointVersion) throw fail("unsupported checkpoint version " + std::to_string(version));
  auto read_key = [&](const char* key) -> unsigned long long {
    std::string k;
    std::string v;
    if (!(in >> k >> v) || k != key) throw fail(std::string("expected '") + key + "'");
    if (std::string(key) == "vocab_hash") return std::strtoull(v.c_str(), nullptr, 16);
    return static_cast<unsigned long long>(csv::parse_integer(v));
  };
  const auto vocab_size = read_key("vocab_size");
  const auto seq_len = read_key("seq_len");
  NetShape shape;
  shape.layers = static_cast<int>(read_key("layers"));
  shape.heads = static_cast<int>(read_key("heads"));
  shape.d_model = static_cast<int>(read_key("d_model"));
  shape.d_ff = static_cast<int>(read_key("d_ff"));
  shape.d_hidden = static_cast<int>(read_key("d_hidden"));
  shape.d_out = static_cast<int>(read_key("d_out"));
  const auto hash = read_key("vocab_hash");

  EmbeddingNet net(vocab_size, seq_len, shape, 0, hash);
  net.params_.for_each([&](const std::string& name, Matrix& m) {
    std::string tag;
    std::string got;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    if (!(in >> tag >> got >> rows >> cols) || tag != "tensor") throw fail("expected tensor '" + name + "'");
    if (got != name) throw fail("expected tensor '" + name + "', found '" + got + "'");
    if (rows != m.rows() || cols != m.cols()) {
      throw fail("tensor '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                 ", expected " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    }
    std::string tok;
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        if (!(in >> tok)) throw fail("truncated tensor '" + name + "'");
        char* end = nullptr;
        m(r, c) = std::strtod(tok.c_str(), &end);
        if (end != tok.c_str() + tok.size()) throw fail("bad value in tensor '" + name + "'");
      }
    }
  });
  std::string end;
  if (!(in >> end) || end != "end") throw fail("missing end marker");
  return net;
}

void EmbeddingNet::save(const std::string& path) const { csv::write_text_file(path, serialize()); }

EmbeddingNet EmbeddingNet::load(const std::string& path) { return deserialize(csv::read_text_file(path), path); }

double pair_loss(double im, double dot) { return -im * log_sigmoid(dot); }

double pair_loss_grad(double im, double dot) { return -im * (1.0 - sigmoid(dot)); }

double pair_loss(double im, double dot, NegativeTerm term) {
  if (im < 0.0 && term == NegativeTerm::Logistic) return im * log_sigmoid(-dot);
  return pair_loss(im, dot);
}

double pair_loss_grad(double im, double dot, NegativeTerm term) {
  if (im < 0.0 && term == NegativeTerm::Logistic) return -im * sigmoid(dot);
  return pair_loss_grad(im, dot);
}

const char* to_string(NegativeTerm term) { return term == NegativeTerm::Logistic ? "logistic" : "as_written"; }

NegativeTerm parse_negative_term(const std::string& name) {
  if (name == "as_written") return NegativeTerm::AsWritten;
  if (name == "logistic") return NegativeTerm::Logistic;
  throw Error("unknown negative term '" + name + "' (expected as_written or logistic)");
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("dot product of vectors with different sizes");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double pair_loss_and_grad(const EmbeddingNet& net, const TokenSequence& a, const TokenSequence& b, double im,
                          NetParams* grads, NegativeTerm term) {
  const auto ua = net.forward(a);
  const auto ub = net.forward(b);
  const double d = dot(ua, ub);
  if (grads) {
    const double g = pair_loss_grad(im, d, term);
    std::vector<double> da(ub.size()), db(ua.size());
    for (std::size_t i = 0; i < ua.size(); ++i) {
      da[i] = g * ub[i];
      db[i] = g * ua[i];
    }
    net.forward_backward(a, da, *grads);
    net.forward_backward(b, db, *grads);
  }
  return pair_loss(im, d, term);
}

GradCheckResult grad_check(const EmbeddingNet& net_in, const TokenSequence& a, const TokenSequence& b, double im,
                           double epsilon, std::size_t n_coordinates, std::uint64_t seed, double floor) {
  EmbeddingNet net = net_in;
  NetParams grads = net.params().zeros_like();
  pair_loss_and_grad(net, a, b, im, &grads);

  std::vector<Matrix*> tensors;
  std::vector<Matrix*> grad_tensors;
  std::vector<std::string> names;
  net.params().for_each([&](const std::string& name, Matrix& m) {
    tensors.push_back(&m);
    names.push_back(name);
  });
  grads.for_each([&](const std::string&, Matrix& m) { grad_tensors.push_back(&m); });

  std::set<std::int32_t> used;
  for (const auto* s : {&a, &b}) {
    const auto ids = encoded_ids(*s);
    used.insert(ids.begin(), ids.end());
  }
  const std::vector<std::int32_t> used_rows(used.begin(), used.end());

  GradCheckResult result;
  Rng rng = make_rng(seed, "embed.gradcheck");
  for (std::size_t k = 0; k < n_coordinates; ++k) {
    const auto ti = uniform_index(rng, tensors.size());
    Matrix& m = *tensors[ti];
    Eigen::Index r = 0;
    if (names[ti] == "token_embedding") {
      r = used_rows[uniform_index(rng, used_rows.size())];
    } else {
      r = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(m.rows())));
    }
    const auto c = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(m.cols())));
    const double analytic = (*grad_tensors[ti])(r, c);
    if (!std::isfinite(analytic)) throw Error("non-finite analytic gradient in '" + names[ti] + "'");
    const double saved = m(r, c);
    m(r, c) = saved + epsilon;
    const double up = pair_loss_and_grad(net, a, b, im, nullptr);
    m(r, c) = saved - epsilon;
    const double down = pair_loss_and_grad(net, a, b, im, nullptr);
    m(r, c) = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    if (!std::isfinite(numeric)) throw Error("non-finite numeric gradient in '" + names[ti] + "'");
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    result.max_relative_error = std::max(result.max_relative_error, std::abs(analytic - numeric) / denom);
    result.max_abs_gradient = std::max(result.max_abs_gradient, std::abs(analytic));
    ++result.coordinates;
  }
  return result;
}

AdamOptimizer::AdamOptimizer(const NetParams& like, const TrainConfig& cfg)
    : cfg_(cfg), m_(like.zeros_like()), v_(like.zeros_like()) {}

void AdamOptimizer::step(NetParams& params, const NetParams& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
  std::vector<Matrix*> p, m, v;
  std::vector<const Matrix*> g;
  params.for_each([&](const std::string&, Matrix& x) { p.push_back(&x); });
  m_.for_each([&](const std::string&, Matrix& x) { m.push_back(&x); });
  v_.for_each([&](const std::string&, Matrix& x) { v.push_back(&x); });
  grads.for_each([&](const std::string&, const Matrix& x) { g.push_back(&x); });
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i]->array() = cfg_.adam_beta1 * m[i]->array() + (1.0 - cfg_.adam_beta1) * g[i]->array();
    v[i]->array() = cfg_.adam_beta2 * v[i]->array() + (1.0 - cfg_.adam_beta2) * g[i]->array().square();
    p[i]->array() -=
        cfg_.learning_rate * (m[i]->array() / bc1) / ((v[i]->array() / bc2).sqrt() + cfg_.adam_epsilon);
  }
}

namespace {

struct IndexedPairs {
  std::vector<std::string> ad_ids;         // sorted unique ids referenced by pairs
  std::vector<const TokenSequence*> seqs;  // aligned with ad_ids
  std::vector<std::pair<std::size_t, std::size_t>> ends;
  std::vector<double> im;
};

IndexedPairs index_pairs(std::span<const AdPair> pairs, const std::map<std::string, TokenSequence>& tokens) {
  IndexedPairs ix;
  std::map<std::string, std::size_t> pos;
  for (const auto& p : pairs) {
    for (const auto* id : {&p.ad_i, &p.ad_j}) {
      if (pos.count(*id)) continue;
      auto it = tokens.find(*id);
      if (it == tokens.end()) throw Error("pair references ad '" + *id + "' without a token sequence");
      pos.emplace(*id, 0);
    }
  }
  for (auto& [id, idx] : pos) {
    idx = ix.ad_ids.size();
    ix.ad_ids.push_back(id);
    ix.seqs.push_back(&tokens.at(id));
  }
  for (const auto& p : pairs) {
    if (p.im < -1.0 || p.im > 1.0 || !std::isfinite(p.im)) throw Error("pair im outside [-1, 1]");
    ix.ends.emplace_back(pos.at(p.ad_i), pos.at(p.ad_j));
    ix.im.push_back(p.im);
  }
  return ix;
}

double mean_loss_indexed(const EmbeddingNet& net, const IndexedPairs& ix, NegativeTerm term) {
  std::vector<Embedding> out(ix.seqs.size());
  for (std::size_t i = 0; i < ix.seqs.size(); ++i) out[i] = net.forward(*ix.seqs[i]);
  double s = 0.0;
  for (std::size_t k = 0; k < ix.ends.size(); ++k) {
    s += pair_loss(ix.im[k], dot(out[ix.ends[k].first], out[ix.ends[k].second]), term);
  }
  return s / static_cast<double>(ix.ends.size());
}

}  // namespace

double mean_pair_loss(const EmbeddingNet& net, std::span<const AdPair> pairs,
                      const std::map<std::string, TokenSequence>& tokens, NegativeTerm term) {
  if (pairs.empty()) throw Error("no pairs to evaluate");
  return mean_loss_indexed(net, index_pairs(pairs, tokens), term);
}

TrainResult train_embedding(EmbeddingNet net, std::span<const AdPair> pairs,
                            const std::map<std::string, TokenSequence>& tokens, const TrainConfig& cfg) {
  cfg.validate();
  if (pairs.empty()) throw Error("cannot train the intention embedding on an empty pair list");
  const auto ix = index_pairs(pairs, tokens);
  const auto d_out = static_cast<std::size_t>(net.shape().d_out);

  AdamOptimizer adam(net.params(), cfg);
  NetParams grads = net.params().zeros_like();
  std::vector<std::size_t> order(ix.ends.size());
  std::vector<double> curve;
  curve.reserve(static_cast<std::size_t>(cfg.epochs));
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  // Per-batch scratch indexed by ad position.
  std::vector<Embedding> outs(ix.seqs.size());
  std::vector<std::vector<double>> d_outs(ix.seqs.size());
  std::vector<char> live(ix.seqs.size(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, "embed.shuffle", static_cast<std::uint64_t>(epoch)));
    shuffle(order.begin(), order.end(), rng);

    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      std::vector<std::size_t> members;
      for (std::size_t k = start; k < stop; ++k) {
        for (auto a : {ix.ends[order[k]].first, ix.ends[order[k]].second}) {
          if (!live[a]) {
            live[a] = 1;
            members.push_back(a);
          }
        }
      }
      std::sort(members.begin(), members.end());
      for (auto a : members) {
        outs[a] = net.forward(*ix.seqs[a]);
        d_outs[a].assign(d_out, 0.0);
      }
      const double inv_b = 1.0 / static_cast<double>(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        const auto [a, b] = ix.ends[order[k]];
        const double g = pair_loss_grad(ix.im[order[k]], dot(outs[a], outs[b]), cfg.negative_term) * inv_b;
        for (std::size_t e = 0; e < d_out; ++e) {
          d_outs[a][e] += g * outs[b][e];
          d_outs[b][e] += g * outs[a][e];
        }
      }
      grads.set_zero();
      for (auto a : members) {
        net.forward_backward(*ix.seqs[a], d_outs[a], grads);
        live[a] = 0;
      }
      adam.step(net.params(), grads);
    }
    const double loss = mean_loss_indexed(net, ix, cfg.negative_term);
    if (!std::isfinite(loss)) throw Error("training diverged: non-finite loss at epoch " + std::to_string(epoch));
    curve.push_back(loss);
  }
  return TrainResult{std::move(net), std::move(curve)};
}

TrainResult train_embedding(std::span<const AdPair> pairs, const std::map<std::string, TokenSequence>& tokens,
                            const TrainConfig& cfg, std::size_t vocab_size, std::uint64_t vocab_hash) {
  cfg.validate();
  if (tokens.empty()) throw Error("no token sequences supplied");
  const auto seq_len = tokens.begin()->second.length();
  EmbeddingNet net(vocab_size, seq_len, cfg.shape, cfg.seed, vocab_hash);
  return train_embedding(std::move(net), pairs, tokens, cfg);
}

std::map<std::string, Embedding> embed_catalog(const EmbeddingNet& net, std::span<const Ad> ads,
                                               const Vocabulary& vocab, int threads) {
  if (net.vocab_hash() != 0 && net.vocab_hash() != vocab.hash()) {
    throw Error("vocabulary does not match the one the network was trained with");
  }
  if (vocab.size() != net.vocab_size()) throw Error("vocabulary size does not match the network");
  std::vector<Embedding> out(ads.size());
  const auto work = [&](std::size_t tid, std::size_t stride) {
    for (std::size_t i = tid; i < ads.size(); i += stride) {
      out[i] = net.forward(tokenize_ad(ads[i], vocab, net.seq_len()));
    }
  };
  const auto n_threads = static_cast<std::size_t>(std::max(1, threads));
  if (n_threads == 1 || ads.size() < 2) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work, t, n_threads);
    for (auto& t : pool) t.join();
  }
  std::map<std::string, Embedding> result;
  for (std::size_t i = 0; i < ads.size(); ++i) result.emplace(ads[i].ad_id, std::move(out[i]));
  return result;
}

void write_embeddings(const std::string& path, const std::map<std::string, Embedding>& embeddings) {
  csv::Writer w(path);
  std::vector<std::string> header = {"ad_id"};
  const std::size_t dim = embeddings.empty() ? 0 : embeddings.begin()->second.size();
  for (std::size_t i = 0; i < dim; ++i) header.push_back("v_" + std::to_string(i));
  w.row(header);
  for (const auto& [id, v] : embeddings) {
    if (v.size() != dim) throw Error("embeddings have inconsistent dimensions");
    std::vector<std::string> f = {id};
    for (double x : v) f.push_back(csv::format_double(x));
    w.row(f);
  }
  w.close();
}

std::map<std::string, Embedding> read_embeddings(const std::string& path) {
  const auto table = csv::read_file(path);
  if (table.header.empty() || table.header[0] != "ad_id") throw ParseError(path, 1, "ad_id", "expected ad_id column");
  for (std::size_t i = 1; i < table.header.size(); ++i) {
    if (table.header[i] != "v_" + std::to_string(i - 1)) {
      throw ParseError(path, 1, table.header[i], "expected v_" + std::to_string(i - 1));
    }
  }
  csv::require_rectangular(table);
  std::map<std::string, Embedding> out;
  for (const auto& row : table.rows) {
    Embedding v;
    for (std::size_t i = 1; i < row.fields.size(); ++i) {
      try {
        v.push_back(csv::parse_double(row.fields[i]));
      } catch (const Error& e) {
        throw ParseError(path, row.line, table.header[i], e.what());
      }
    }
    if (!out.emplace(row.fields[0], std::move(v)).second) {
      throw ParseError(path, row.line, "ad_id", "duplicate ad_id '" + row.fields[0] + "'");
    }
  }
  return out;
}

}  // namespace sembid
