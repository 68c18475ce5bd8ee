#include "sembid/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "sembid/csv.hpp"
#include "sembid/error.hpp"
#include "sembid/random.hpp"

namespace sembid {

namespace {

constexpr const char* kClassifierMagic = "sembid-classifier";
constexpr int kClassifierVersion = 1;

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = (2.0 * uniform01(rng) - 1.0) * scale;
  }
  return m;
}

Matrix softmax_rows(const Matrix& z) {
  Matrix p(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double mx = z.row(r).maxCoeff();
    double total = 0.0;
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      p(r, c) = std::exp(z(r, c) - mx);
      total += p(r, c);
    }
    p.row(r) /= total;
  }
  return p;
}

Matrix as_row(std::span<const double> v) {
  return Eigen::Map<const Matrix>(v.data(), 1, static_cast<Eigen::Index>(v.size()));
}

struct Adam {
  const ClassifierConfig& cfg;
  std::vector<Matrix> m, v;
  long long t = 0;

  Adam(const ClassifierConfig& c, const std::vector<Matrix*>& params) : cfg(c) {
    for (const auto* p : params) {
      m.push_back(Matrix::Zero(p->rows(), p->cols()));
      v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }

  void step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads) {
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.size(); ++k) {
      m[k] = cfg.adam_beta1 * m[k] + (1.0 - cfg.adam_beta1) * grads[k];
      v[k] = cfg.adam_beta2 * v[k] + (1.0 - cfg.adam_beta2) * grads[k].cwiseProduct(grads[k]);
      const Matrix mhat = m[k] / bc1;
      const Matrix vhat = v[k] / bc2;
      *params[k] -= (cfg.learning_rate * mhat.array() / (vhat.array().sqrt() + cfg.adam_epsilon)).matrix();
    }
  }
};

}  // namespace

void ClassifierConfig::validate() const {
  if (hidden < 1) throw Error("classifier hidden width must be positive");
  if (!(learning_rate >= 0.0)) throw Error("classifier learning_rate must be non-negative");
  if (batch_size < 1 || epochs < 0) throw Error("classifier batch_size must be positive and epochs non-negative");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw Error("holdout_fraction must lie in [0, 1)");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw Error("ADAM betas must lie in [0, 1)");
  }
}

ProductTypeClassifier::ProductTypeClassifier(std::vector<std::string> labels, Matrix w1, Matrix b1, Matrix w2,
                                             Matrix b2)
    : labels_(std::move(labels)), w1_(std::move(w1)), b1_(std::move(b1)), w2_(std::move(w2)), b2_(std::move(b2)) {
  if (labels_.empty()) throw Error("classifier needs at least one label");
  if (!std::is_sorted(labels_.begin(), labels_.end()) ||
      std::adjacent_find(labels_.begin(), labels_.end()) != labels_.end()) {
    throw Error("classifier labels must be sorted and unique");
  }
  const auto k = static_cast<Eigen::Index>(labels_.size());
  if (b1_.rows() != 1 || b1_.cols() != w1_.cols() || w2_.rows() != w1_.cols() || w2_.cols() != k ||
      b2_.rows() != 1 || b2_.cols() != k) {
    throw Error("classifier tensor shapes are inconsistent");
  }
}

ProductTypeClassifier::ProductTypeClassifier(std::vector<std::string> labels, std::size_t input_dim, int hidden,
                                             std::uint64_t seed)
    : labels_(std::move(labels)) {
  std::sort(labels_.begin(), labels_.end());
  labels_.erase(std::unique(labels_.begin(), labels_.end()), labels_.end());
  if (labels_.empty() || input_dim == 0 || hidden < 1) throw Error("classifier needs labels, inputs and a hidden layer");
  Rng rng = make_rng(seed, "cluster.classifier.init");
  const auto d = static_cast<Eigen::Index>(input_dim);
  const auto k = static_cast<Eigen::Index>(labels_.size());
  w1_ = uniform_matrix(d, hidden, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  b1_ = uniform_matrix(1, hidden, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  w2_ = uniform_matrix(hidden, k, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  b2_ = uniform_matrix(1, k, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
}

std::vector<double> ProductTypeClassifier::probabilities(std::span<const double> embedding) const {
  if (embedding.size() != input_dim()) {
    throw Error("classifier expects " + std::to_string(input_dim()) + "-dimensional embeddings, got " +
                std::to_string(embedding.size()));
  }
  const Matrix h = ((as_row(embedding) * w1_) + b1_).array().tanh().matrix();
  const Matrix p = softmax_rows(h * w2_ + b2_);
  return {p.data(), p.data() + p.size()};
}

std::size_t ProductTypeClassifier::predict_index(std::span<const double> embedding) const {
  const auto p = probabilities(embedding);
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  return best;
}

const std::string& ProductTypeClassifier::predict(std::span<const double> embedding) const {
  return labels_[predict_index(embedding)];
}

std::string ProductTypeClassifier::serialize() const {
  std::ostringstream out;
  out << kClassifierMagic << ' ' << kClassifierVersion << '\n';
  out << "labels " << labels_.size() << '\n';
  for (const auto& l : labels_) out << csv::escape(l) << '\n';
  const std::pair<const char*, const Matrix*> tensors[] = {{"w1", &w1_}, {"b1", &b1_}, {"w2", &w2_}, {"b2", &b2_}};
  for (const auto& [name, m] : tensors) {
    out << "tensor " << name << ' ' << m->rows() << ' ' << m->cols() << '\n';
    for (Eigen::Index r = 0; r < m->rows(); ++r) {
      for (Eigen::Index c = 0; c < m->cols(); ++c) out << (c ? " " : "") << csv::format_hex((*m)(r, c));
      out << '\n';
    }
  }
  out << "end\n";
  return out.str();
}

ProductTypeClassifier ProductTypeClassifier::deserialize(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  auto fail = [&](const std::string& what) { return Error(source + ": " + what); };
  std::string line;
  std::getline(in, line);
  if (line != std::string(kClassifierMagic) + " " + std::to_string(kClassifierVersion)) {
    throw fail("not a classifier file (or unsupported version)");
  }
  std::getline(in, line);
  if (line.rfind("labels ", 0) != 0) throw fail("expected label count");
  const auto n = csv::parse_integer(line.substr(7));
  if (n < 1) throw fail("label count must be positive");
  std::vector<std::string> labels;
  for (long long i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw fail("truncated label list");
    const auto t = csv::parse(line + "\n", source);
    labels.push_back(t.header.empty() ? std::string() : t.header[0]);
  }
  std::vector<Matrix> tensors;
  for (const char* name : {"w1", "b1", "w2", "b2"}) {
    std::string tag, got;
    Eigen::Index rows = 0, cols = 0;
    if (!(in >> tag >> got >> rows >> cols) || tag != "tensor" || got != name || rows < 1 || cols < 1) {
      throw fail(std::string("expected tensor '") + name + "'");
    }
    Matrix m(rows, cols);
    std::string tok;
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        if (!(in >> tok)) throw fail(std::string("truncated tensor '") + name + "'");
        m(r, c) = csv::parse_hex(tok);
      }
    }
    tensors.push_back(std::move(m));
  }
  std::string end;
  if (!(in >> end) || end != "end") throw fail("missing end marker");
  return ProductTypeClassifier(std::move(labels), tensors[0], tensors[1], tensors[2], tensors[3]);
}

void ProductTypeClassifier::save(const std::string& path) const { csv::write_text_file(path, serialize()); }

ProductTypeClassifier ProductTypeClassifier::load(const std::string& path) {
  return deserialize(csv::read_text_file(path), path);
}

double classifier_accuracy(const ProductTypeClassifier& clf, std::span<const LabeledEmbedding> samples) {
  if (samples.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& s : samples) hit += clf.predict(s.embedding) == s.label ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(samples.size());
}

ClassifierTrainResult train_classifier(std::span<const LabeledEmbedding> samples, const ClassifierConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw Error("classifier training set is empty");
  std::set<std::string> label_set;
  const std::size_t dim = samples.front().embedding.size();
  for (const auto& s : samples) {
    if (s.embedding.size() != dim || dim == 0) throw Error("classifier samples have inconsistent dimensions");
    label_set.insert(s.label);
  }
  if (label_set.size() < 2) throw Error("classifier training needs at least two distinct product types");
  std::vector<std::string> labels(label_set.begin(), label_set.end());

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = make_rng(cfg.seed, "cluster.classifier.split");
  shuffle(order.begin(), order.end(), split_rng);
  auto n_hold = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(samples.size())));
  if (n_hold >= samples.size()) n_hold = samples.size() - 1;
  std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  std::sort(hold.begin(), hold.end());
  std::sort(train.begin(), train.end());

  ProductTypeClassifier clf(labels, dim, cfg.hidden, cfg.seed);
  const auto label_index = [&](const std::string& l) {
    return static_cast<Eigen::Index>(std::lower_bound(labels.begin(), labels.end(), l) - labels.begin());
  };
  std::vector<Matrix*> params = {&clf.w1(), &clf.b1(), &clf.w2(), &clf.b2()};
  Adam adam(cfg, params);
  const auto k = static_cast<Eigen::Index>(labels.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> perm = train;
    Rng rng(derive_seed(cfg.seed, "cluster.classifier.shuffle", static_cast<std::uint64_t>(epoch)));
    shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t start = 0; start < perm.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(perm.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto b = static_cast<Eigen::Index>(stop - start);
      Matrix x(b, static_cast<Eigen::Index>(dim));
      Matrix y = Matrix::Zero(b, k);
      for (Eigen::Index r = 0; r < b; ++r) {
        const auto& s = samples[perm[start + static_cast<std::size_t>(r)]];
        x.row(r) = as_row(s.embedding);
        y(r, label_index(s.label)) = 1.0;
      }
      const Matrix h = ((x * clf.w1()).rowwise() + clf.b1().row(0)).array().tanh().matrix();
      const Matrix p = softmax_rows((h * clf.w2()).rowwise() + clf.b2().row(0));
      const Matrix dz = (p - y) / static_cast<double>(b);
      const Matrix da = ((dz * clf.w2().transpose()).array() * (1.0 - h.array().square())).matrix();
      std::vector<Matrix> grads = {x.transpose() * da, da.colwise().sum(), h.transpose() * dz, dz.colwise().sum()};
      adam.step(params, grads);
    }
  }

  std::vector<LabeledEmbedding> hold_set, train_set;
  for (auto i : hold) hold_set.push_back(samples[i]);
  for (auto i : train) train_set.push_back(samples[i]);
  ClassifierTrainResult result{std::move(clf), 0.0, 0.0, hold_set.size()};
  result.train_accuracy = classifier_accuracy(result.classifier, train_set);
  result.holdout_accuracy =
      hold_set.empty() ? result.train_accuracy : classifier_accuracy(result.classifier, hold_set);
  return result;
}

std::vector<LabeledEmbedding> classifier_training_set(std::span<const Ad> ads,
                                                      const std::map<std::string, Embedding>& embeddings) {
  std::vector<LabeledEmbedding> out;
  for (const auto& ad : ads) {
    if (ad.items.size() != 1 || !ad.product_type) continue;
    const auto it = embeddings.find(ad.ad_id);
    if (it == embeddings.end()) throw Error("ad '" + ad.ad_id + "' has no embedding");
    out.push_back({it->second, *ad.product_type});
  }
  return out;
}

CatalogClassifier fit_catalog_classifier(std::span<const Ad> ads, const std::map<std::string, Embedding>& embeddings,
                                         const ClassifierConfig& cfg) {
  CatalogClassifier out;
  const auto labeled = classifier_training_set(ads, embeddings);
  out.labeled = labeled.size();
  std::set<std::string> labels;
  for (const auto& s : labeled) labels.insert(s.label);
  if (labels.size() >= 2) {
    auto trained = train_classifier(labeled, cfg);
    out.holdout_accuracy = trained.holdout_accuracy;
    out.classifier.emplace(std::move(trained.classifier));
  } else if (labels.size() == 1) {
    // Nothing to discriminate: every ad gets the only label.
    out.classifier.emplace(std::vector<std::string>(labels.begin(), labels.end()), labeled.front().embedding.size(),
                           cfg.hidden, cfg.seed);
    out.holdout_accuracy = 1.0;
  }
  return out;
}

std::string assign_product_type(const Ad& ad, std::span<const double> embedding,
                                const ProductTypeClassifier* clf) {
  if (ad.items.size() == 1 && ad.product_type) return *ad.product_type;
  if (clf == nullptr) {
    throw Error("ad '" + ad.ad_id + "' needs a product-type classifier (multi-item or unlabelled)");
  }
  return clf->predict(embedding);
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("cosine distance of vectors with different dimensions");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (!(aa > 0.0) || !(bb > 0.0) || !std::isfinite(aa) || !std::isfinite(bb)) {
    throw Error("cosine distance needs finite non-zero vectors");
  }
  return std::clamp(1.0 - ab / std::sqrt(aa * bb), 0.0, 2.0);
}

Partition agglomerate(std::span<const Embedding> embeddings, double threshold) {
  const std::size_t n = embeddings.size();
  if (n == 0) throw Error("agglomerate needs at least one vector");
  if (std::isnan(threshold)) throw Error("agglomerate threshold is NaN");

  // sum[i * n + j]: total pairwise distance between clusters i and j.
  std::vector<double> sum(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      sum[i * n + j] = sum[j * n + i] = cosine_distance(embeddings[i], embeddings[j]);
    }
  }
  std::vector<double> size(n, 1.0);
  std::vector<char> active(n, 1);
  std::vector<std::vector<std::size_t>> members(n);
  for (std::size_t i = 0; i < n; ++i) members[i] = {i};

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const auto linkage = [&](std::size_t i, std::size_t j) { return sum[i * n + j] / (size[i] * size[j]); };

  // Per row, the nearest active cluster with a larger index.
  std::vector<double> best(n, kInf);
  std::vector<std::size_t> nn(n, kNone);
  const auto refresh = [&](std::size_t i) {
    best[i] = kInf;
    nn[i] = kNone;
    for (std::size_t j = i + 1; j < n; ++j) {
      if (!active[j]) continue;
      const double l = linkage(i, j);
      if (l < best[i]) {
        best[i] = l;
        nn[i] = j;
      }
    }
  };
  for (std::size_t i = 0; i < n; ++i) refresh(i);

  for (;;) {
    std::size_t a = kNone;
    for (std::size_t i = 0; i < n; ++i) {
      if (active[i] && nn[i] != kNone && (a == kNone || best[i] < best[a])) a = i;
    }
    if (a == kNone || !(best[a] <= threshold)) break;
    const std::size_t b = nn[a];

    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == a || k == b) continue;
      sum[a * n + k] = sum[k * n + a] = sum[a * n + k] + sum[b * n + k];
    }
    size[a] += size[b];
    active[b] = 0;
    members[a].insert(members[a].end(), members[b].begin(), members[b].end());
    members[b].clear();

    for (std::size_t i = 0; i < b; ++i) {
      if (!active[i]) continue;
      if (i == a || nn[i] == a || nn[i] == b) {
        refresh(i);
      } else if (i < a) {
        const double l = linkage(i, a);
        if (l < best[i] || (l == best[i] && a < nn[i])) {
          best[i] = l;
          nn[i] = a;
        }
      }
    }
  }

  Partition p;
  p.labels.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    auto m = members[i];
    std::sort(m.begin(), m.end());
    for (auto idx : m) p.labels[idx] = p.clusters.size();
    p.clusters.push_back(std::move(m));
  }
  return p;
}

Embedding normalized_mean(std::span<const Embedding> vectors) {
  if (vectors.empty()) throw Error("mean of no vectors");
  if (vectors.size() == 1) return vectors.front();
  Embedding m(vectors.front().size(), 0.0);
  for (const auto& v : vectors) {
    if (v.size() != m.size()) throw Error("vectors have inconsistent dimensions");
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += v[i];
  }
  double norm = 0.0;
  for (double x : m) norm += x * x;
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) return vectors.front();
  for (double& x : m) x /= norm;
  return m;
}

namespace {

struct TypedAds {
  std::map<std::string, std::vector<std::size_t>> by_type;  // indices into sorted ads
  std::vector<const Ad*> sorted;
  std::vector<const Embedding*> emb;
  std::size_t classified = 0;
};

TypedAds type_ads(std::span<const Ad> ads, const std::map<std::string, Embedding>& embeddings,
                  const ProductTypeClassifier* clf) {
  TypedAds t;
  for (const auto& ad : ads) t.sorted.push_back(&ad);
  std::sort(t.sorted.begin(), t.sorted.end(), [](const Ad* x, const Ad* y) { return x->ad_id < y->ad_id; });
  for (std::size_t i = 0; i < t.sorted.size(); ++i) {
    const Ad& ad = *t.sorted[i];
    if (i > 0 && t.sorted[i - 1]->ad_id == ad.ad_id) throw Error("duplicate ad_id '" + ad.ad_id + "'");
    const auto it = embeddings.find(ad.ad_id);
    if (it == embeddings.end()) throw Error("ad '" + ad.ad_id + "' has no embedding");
    t.emb.push_back(&it->second);
    const bool direct = ad.items.size() == 1 && ad.product_type;
    t.classified += direct ? 0 : 1;
    t.by_type[assign_product_type(ad, it->second, clf)].push_back(i);
  }
  return t;
}

AdGroup make_group(const TypedAds& t, const std::string& type, std::size_t ordinal,
                   const std::vector<std::size_t>& idx) {
  AdGroup g;
  g.group_id = type + "_" + std::to_string(ordinal);
  g.product_type = type;
  std::vector<Embedding> vecs;
  for (auto i : idx) {
    g.members.push_back(t.sorted[i]->ad_id);
    vecs.push_back(*t.emb[i]);
  }
  g.centroid = normalized_mean(vecs);
  return g;
}

}  // namespace

std::vector<AdGroup> build_groups(std::span<const Ad> ads, const std::map<std::string, Embedding>& embeddings,
                                  const ProductTypeClassifier* clf, double threshold, int threads,
                                  GroupingStats* stats) {
  const TypedAds t = type_ads(ads, embeddings, clf);
  std::vector<std::pair<std::string, const std::vector<std::size_t>*>> work;
  for (const auto& [type, idx] : t.by_type) work.emplace_back(type, &idx);

  std::vector<std::vector<AdGroup>> per_type(work.size());
  const auto run = [&](std::size_t tid, std::size_t stride) {
    for (std::size_t w = tid; w < work.size(); w += stride) {
      const auto& idx = *work[w].second;
      std::vector<Embedding> vecs;
      for (auto i : idx) vecs.push_back(*t.emb[i]);
      const Partition p = agglomerate(vecs, threshold);
      for (std::size_t c = 0; c < p.clusters.size(); ++c) {
        std::vector<std::size_t> chosen;
        for (auto m : p.clusters[c]) chosen.push_back(idx[m]);
        per_type[w].push_back(make_group(t, work[w].first, c, chosen));
      }
    }
  };
  const auto n_threads = std::min(work.size(), static_cast<std::size_t>(std::max(1, threads)));
  if (n_threads <= 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(run, i, n_threads);
    for (auto& th : pool) th.join();
  }

  std::vector<AdGroup> groups;
  for (auto& v : per_type) {
    for (auto& g : v) groups.push_back(std::move(g));
  }
  if (stats) *stats = {t.sorted.size(), groups.size(), work.size(), t.classified};
  return groups;
}

std::vector<AdGroup> singleton_groups(std::span<const Ad> ads, const std::map<std::string, Embedding>& embeddings,
                                      const ProductTypeClassifier* clf) {
  const TypedAds t = type_ads(ads, embeddings, clf);
  std::vector<AdGroup> groups;
  for (const auto& [type, idx] : t.by_type) {
    for (std::size_t c = 0; c < idx.size(); ++c) groups.push_back(make_group(t, type, c, {idx[c]}));
  }
  return groups;
}

void write_groups(const std::string& path, std::span<const AdGroup> groups) {
  csv::Writer w(path);
  w.row({"group_id", "product_type", "ad_id"});
  for (const auto& g : groups) {
    for (const auto& m : g.members) w.row({g.group_id, g.product_type, m});
  }
  w.close();
}

std::vector<AdGroup> read_groups(const std::string& path, const std::map<std::string, Embedding>* embeddings) {
  const auto table = csv::read_file(path);
  csv::require_header(table, {"group_id", "product_type", "ad_id"});
  csv::require_rectangular(table);
  std::vector<AdGroup> groups;
  std::map<std::string, std::size_t> index;
  std::set<std::string> seen;
  for (const auto& row : table.rows) {
    const auto& gid = row.fields[0];
    const auto& type = row.fields[1];
    const auto& ad = row.fields[2];
    if (gid.empty()) throw ParseError(path, row.line, "group_id", "empty group id");
    if (ad.empty()) throw ParseError(path, row.line, "ad_id", "empty ad id");
    if (!seen.insert(ad).second) throw ParseError(path, row.line, "ad_id", "ad '" + ad + "' is in two groups");
    auto [it, fresh] = index.emplace(gid, groups.size());
    if (fresh) {
      groups.push_back({gid, type, {}, {}});
    } else if (groups[it->second].product_type != type) {
      throw ParseError(path, row.line, "product_type", "group '" + gid + "' spans two product types");
    }
    groups[it->second].members.push_back(ad);
  }
  for (auto& g : groups) {
    std::sort(g.members.begin(), g.members.end());
    if (!embeddings) continue;
    std::vector<Embedding> vecs;
    for (const auto& m : g.members) {
      const auto e = embeddings->find(m);
      if (e == embeddings->end()) throw Error("ad '" + m + "' in group '" + g.group_id + "' has no embedding");
      vecs.push_back(e->second);
    }
    g.centroid = normalized_mean(vecs);
  }
  return groups;
}

}  // namespace sembid
