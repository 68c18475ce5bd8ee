#include "sembid/rpc_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "sembid/csv.hpp"
#include "sembid/error.hpp"
#include "sembid/random.hpp"

namespace sembid {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr const char* kLinearMagic = "sembid-linear";
constexpr const char* kGbrtMagic = "sembid-gbrt";
constexpr int kModelVersion = 1;

// Sum of the present values; missing if none is present.
struct SumAcc {
  double sum = 0.0;
  int count = 0;
  void add(const std::optional<double>& v) {
    if (!v) return;
    sum = count == 0 ? *v : sum + *v;
    ++count;
  }
  std::optional<double> get() const { return count ? std::optional<double>(sum) : std::nullopt; }
};

// Click-weighted mean of the present values. One contributor is passed
// through untouched; all-zero weights fall back to the plain mean.
struct RateAcc {
  double wsum = 0.0, wx = 0.0, x = 0.0, first = 0.0;
  int count = 0;
  void add(const std::optional<double>& v, double w) {
    if (!v) return;
    if (count == 0) first = *v;
    wsum += w;
    wx += w * *v;
    x += *v;
    ++count;
  }
  std::optional<double> get() const {
    if (count == 0) return std::nullopt;
    if (count == 1) return first;
    return wsum > 0.0 ? wx / wsum : x / count;
  }
};

const Ad& lookup(const AdIndex& ads, const std::string& id, const std::string& group) {
  const auto it = ads.find(id);
  if (it == ads.end()) throw Error("group '" + group + "' member '" + id + "' is not in the catalog");
  return *it->second;
}

void write_schema(std::ostream& out, const FeatureSchema& s) {
  out << "schema " << s.extra.size() << ' ' << s.contextual_dim << '\n';
  for (const auto& e : s.extra) out << "extra " << csv::escape(e) << '\n';
}

struct LineReader {
  std::istringstream in;
  std::string source;
  explicit LineReader(const std::string& text, std::string src) : in(text), source(std::move(src)) {}

  Error fail(const std::string& what) const { return Error(source + ": " + what); }
  std::string next() {
    std::string line;
    if (!std::getline(in, line)) throw fail("unexpected end of model file");
    return line;
  }
  // Splits "key v1 v2 ..." checking the key.
  std::vector<std::string> expect(const std::string& key) {
    std::istringstream ls(next());
    std::string k;
    ls >> k;
    if (k != key) throw fail("expected '" + key + "'");
    std::vector<std::string> out;
    for (std::string t; ls >> t;) out.push_back(t);
    return out;
  }
  std::size_t count(const std::string& token) const {
    const auto v = csv::parse_integer(token);
    if (v < 0) throw fail("negative count");
    return static_cast<std::size_t>(v);
  }
};

FeatureSchema read_schema(LineReader& r) {
  const auto head = r.expect("schema");
  if (head.size() != 2) throw r.fail("malformed schema line");
  FeatureSchema s;
  const auto n = r.count(head[0]);
  s.contextual_dim = r.count(head[1]);
  for (std::size_t i = 0; i < n; ++i) {
    const auto line = r.next();
    if (line.rfind("extra ", 0) != 0) throw r.fail("expected extra column name");
    const auto t = csv::parse(line.substr(6) + "\n", r.source);
    s.extra.push_back(t.header.empty() ? std::string() : t.header[0]);
  }
  return s;
}

void check_magic(LineReader& r, const char* magic) {
  if (r.next() != std::string(magic) + " " + std::to_string(kModelVersion)) {
    throw r.fail(std::string("not a ") + magic + " model (or unsupported version)");
  }
}

struct Dataset {
  std::vector<double> x;  // row-major n x width
  std::vector<double> y, w;
  std::size_t n = 0, width = 0;
  const double* row(std::size_t i) const { return x.data() + i * width; }
};

Dataset design(std::span<const GroupSample> samples, const FeatureSchema& schema) {
  Dataset d;
  d.width = schema.width();
  for (const auto& s : samples) {
    if (!s.rpc || !(s.clicks_weight > 0.0)) continue;
    if (!std::isfinite(*s.rpc) || !std::isfinite(s.clicks_weight)) {
      throw Error("sample '" + s.group_id + "' has a non-finite response or weight");
    }
    const auto r = schema.row(s.features);
    d.x.insert(d.x.end(), r.begin(), r.end());
    d.y.push_back(*s.rpc);
    d.w.push_back(s.clicks_weight);
    ++d.n;
  }
  if (d.n == 0) throw Error("no training samples with a response and positive clicks");
  return d;
}

}  // namespace

AdIndex index_ads(std::span<const Ad> ads) {
  AdIndex idx;
  for (const auto& ad : ads) {
    if (!idx.emplace(ad.ad_id, &ad).second) throw Error("duplicate ad_id '" + ad.ad_id + "'");
  }
  return idx;
}

GroupSample aggregate_features(const AdGroup& group, const AdIndex& ads, const AdIndex* responses) {
  GroupSample s;
  s.group_id = group.group_id;
  SumAcc clicks, conversions, spend, revenue;
  RateAcc bounce;
  std::vector<std::string> extra_names;
  std::map<std::string, std::pair<SumAcc, RateAcc>> extra;
  for (const auto& id : group.members) {
    const Ad& ad = lookup(ads, id, group.group_id);
    const auto& f = ad.feedback;
    const double w = f.clicks.value_or(0.0);
    clicks.add(f.clicks);
    conversions.add(f.conversions);
    spend.add(f.spend);
    revenue.add(f.revenue);
    bounce.add(f.bounce_rate, w);
    for (const auto& e : f.extra) {
      auto [it, fresh] = extra.try_emplace(e.name);
      if (fresh) extra_names.push_back(e.name);
      it->second.first.add(e.value);
      it->second.second.add(e.value, w);
    }
  }
  auto& out = s.features;
  out.clicks = clicks.get();
  out.conversions = conversions.get();
  out.spend = spend.get();
  out.revenue = revenue.get();
  out.bounce_rate = bounce.get();
  for (const auto& name : extra_names) {
    const auto& acc = extra.at(name);
    out.extra.push_back({name, is_rate_column(name) ? acc.second.get() : acc.first.get()});
  }
  out.contextual = group.centroid;

  SumAcc r_clicks, r_revenue;
  for (const auto& id : group.members) {
    if (responses) {
      const auto it = responses->find(id);
      if (it == responses->end()) continue;
      r_clicks.add(it->second->feedback.clicks);
      r_revenue.add(it->second->feedback.revenue);
    } else {
      const auto& f = lookup(ads, id, group.group_id).feedback;
      r_clicks.add(f.clicks);
      r_revenue.add(f.revenue);
    }
  }
  s.clicks_weight = r_clicks.get().value_or(0.0);
  if (s.clicks_weight > 0.0 && r_revenue.get()) s.rpc = *r_revenue.get() / s.clicks_weight;
  return s;
}

std::vector<GroupSample> aggregate_groups(std::span<const AdGroup> groups, const AdIndex& ads,
                                          const AdIndex* responses) {
  std::vector<GroupSample> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(aggregate_features(g, ads, responses));
  return out;
}

FeatureSchema FeatureSchema::from_samples(std::span<const GroupSample> samples) {
  FeatureSchema s;
  bool have_dim = false;
  for (const auto& g : samples) {
    for (const auto& e : g.features.extra) {
      if (std::find(s.extra.begin(), s.extra.end(), e.name) == s.extra.end()) s.extra.push_back(e.name);
    }
    if (g.features.contextual.empty()) continue;
    if (!have_dim) {
      s.contextual_dim = g.features.contextual.size();
      have_dim = true;
    } else if (g.features.contextual.size() != s.contextual_dim) {
      throw Error("samples have contextual features of different dimensions");
    }
  }
  return s;
}

std::vector<std::string> FeatureSchema::names() const {
  std::vector<std::string> n = known_feedback_columns();
  n.push_back("hist_rpc");
  n.insert(n.end(), extra.begin(), extra.end());
  for (std::size_t i = 0; i < contextual_dim; ++i) n.push_back("ctx_" + std::to_string(i));
  return n;
}

std::vector<double> FeatureSchema::row(const FeatureVector& f) const {
  std::vector<double> r;
  r.reserve(width());
  for (const auto* v : {&f.clicks, &f.conversions, &f.spend, &f.revenue, &f.bounce_rate}) r.push_back(v->value_or(kNaN));
  r.push_back(f.clicks && f.revenue && *f.clicks > 0.0 ? *f.revenue / *f.clicks : kNaN);
  for (const auto& name : extra) {
    double v = kNaN;
    for (const auto& e : f.extra) {
      if (e.name == name) {
        v = e.value.value_or(kNaN);
        break;
      }
    }
    r.push_back(v);
  }
  if (f.contextual.empty()) {
    r.insert(r.end(), contextual_dim, kNaN);
  } else if (f.contextual.size() == contextual_dim) {
    r.insert(r.end(), f.contextual.begin(), f.contextual.end());
  } else {
    throw Error("contextual feature dimension " + std::to_string(f.contextual.size()) + " does not match model (" +
                std::to_string(contextual_dim) + ")");
  }
  return r;
}

// ---------------------------------------------------------------- linear

double LinearModel::predict_row(std::span<const double> row) const {
  double y = intercept;
  for (std::size_t j = 0; j < coef.size(); ++j) y += coef[j] * (std::isnan(row[j]) ? impute[j] : row[j]);
  return y;
}

double LinearModel::predict(const FeatureVector& f) const { return predict_row(schema.row(f)); }

LinearModel fit_linear(std::span<const GroupSample> samples, double l2) {
  if (!(l2 >= 0.0) || !std::isfinite(l2)) throw Error("l2 must be a finite non-negative number");
  LinearModel m;
  m.schema = FeatureSchema::from_samples(samples);
  const Dataset d = design(samples, m.schema);
  const std::size_t p = d.width;

  m.impute.assign(p, 0.0);
  for (std::size_t j = 0; j < p; ++j) {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t i = 0; i < d.n; ++i) {
      const double v = d.row(i)[j];
      if (!std::isnan(v)) {
        s += v;
        ++c;
      }
    }
    m.impute[j] = c ? s / static_cast<double>(c) : 0.0;
  }

  const double wsum = std::accumulate(d.w.begin(), d.w.end(), 0.0);
  const auto k = static_cast<Eigen::Index>(p + 1);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(d.n), k);
  Eigen::VectorXd y(static_cast<Eigen::Index>(d.n));
  for (std::size_t i = 0; i < d.n; ++i) {
    const double sw = std::sqrt(d.w[i] / wsum);
    const auto r = static_cast<Eigen::Index>(i);
    x(r, 0) = sw;
    for (std::size_t j = 0; j < p; ++j) {
      const double v = d.row(i)[j];
      x(r, static_cast<Eigen::Index>(j + 1)) = sw * (std::isnan(v) ? m.impute[j] : v);
    }
    y(r) = sw * d.y[i];
  }

  Eigen::VectorXd beta;
  if (l2 > 0.0) {
    Eigen::MatrixXd a = x.transpose() * x;
    for (Eigen::Index j = 1; j < k; ++j) a(j, j) += l2;
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
    if (ldlt.info() != Eigen::Success) throw Error("linear regression system could not be solved");
    beta = ldlt.solve(x.transpose() * y);
  } else {
    // Column scaling keeps the rank decision independent of feature units.
    Eigen::VectorXd scale(k);
    for (Eigen::Index j = 0; j < k; ++j) {
      scale(j) = x.col(j).norm();
      if (!(scale(j) > 0.0)) scale(j) = 1.0;
    }
    const Eigen::MatrixXd xs = x * scale.cwiseInverse().asDiagonal();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xs);
    qr.setThreshold(1e-10);
    if (qr.rank() < k) {
      throw Error("linear regression system is singular (rank " + std::to_string(qr.rank()) + " < " +
                  std::to_string(k) + "); use l2 > 0");
    }
    beta = qr.solve(y).cwiseQuotient(scale);
  }
  if (!beta.allFinite()) throw Error("linear regression produced non-finite coefficients; use l2 > 0");
  m.intercept = beta(0);
  m.coef.assign(beta.data() + 1, beta.data() + k);
  return m;
}

std::string LinearModel::serialize() const {
  std::ostringstream out;
  out << kLinearMagic << ' ' << kModelVersion << '\n';
  write_schema(out, schema);
  out << "intercept " << csv::format_hex(intercept) << '\n';
  out << "coef";
  for (double c : coef) out << ' ' << csv::format_hex(c);
  out << "\nimpute";
  for (double v : impute) out << ' ' << csv::format_hex(v);
  out << "\nend\n";
  return out.str();
}

LinearModel LinearModel::deserialize(const std::string& text, const std::string& source) {
  LineReader r(text, source);
  check_magic(r, kLinearMagic);
  LinearModel m;
  m.schema = read_schema(r);
  const auto ic = r.expect("intercept");
  if (ic.size() != 1) throw r.fail("malformed intercept");
  m.intercept = csv::parse_hex(ic[0]);
  for (const auto& t : r.expect("coef")) m.coef.push_back(csv::parse_hex(t));
  for (const auto& t : r.expect("impute")) m.impute.push_back(csv::parse_hex(t));
  if (m.coef.size() != m.schema.width() || m.impute.size() != m.schema.width()) {
    throw r.fail("coefficient count does not match the schema");
  }
  r.expect("end");
  return m;
}

// ---------------------------------------------------------------- gbrt

void GbrtConfig::validate() const {
  if (n_trees < 0) throw Error("n_trees must be non-negative");
  if (max_depth < 1) throw Error("max_depth must be at least 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw Error("learning_rate must be positive");
  if (!(min_leaf_weight >= 0.0)) throw Error("min_leaf_weight must be non-negative");
  if (!(subsample > 0.0 && subsample <= 1.0)) throw Error("subsample must lie in (0, 1]");
}

double RegressionTree::predict_row(std::span<const double> row) const {
  std::size_t i = 0;
  for (;;) {
    const auto& n = nodes[i];
    if (n.feature < 0) return n.value;
    const double x = row[static_cast<std::size_t>(n.feature)];
    const bool left = std::isnan(x) ? n.missing_left : x <= n.threshold;
    i = static_cast<std::size_t>(left ? n.left : n.right);
  }
}

double TreeEnsemble::predict_row(std::span<const double> row, std::size_t n_trees) const {
  if (row.size() != schema.width()) throw Error("feature row width does not match the model");
  double sum = 0.0;
  for (std::size_t t = 0; t < std::min(n_trees, trees.size()); ++t) sum += trees[t].predict_row(row);
  return base_score + learning_rate * sum;
}

double TreeEnsemble::predict(const FeatureVector& f) const { return predict_row(schema.row(f)); }

namespace {

struct Best {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
  bool missing_left = false;
};

struct NodeStats {
  double g = 0.0, w = 0.0;
  std::vector<double> gm, wm;  // per feature: stats of samples missing that feature
};

class TreeBuilder {
 public:
  TreeBuilder(const Dataset& d, const std::vector<std::vector<std::size_t>>& sorted, const GbrtConfig& cfg)
      : d_(d), sorted_(sorted), cfg_(cfg) {}

  RegressionTree build(const std::vector<double>& grad, const std::vector<double>& w,
                       const std::vector<char>& in_bag) {
    RegressionTree tree;
    tree.nodes.push_back(TreeNode{});
    node_of_.assign(d_.n, -1);
    for (std::size_t i = 0; i < d_.n; ++i) {
      if (in_bag[i]) node_of_[i] = 0;
    }
    std::vector<int> open = {0};
    for (int depth = 0; !open.empty(); ++depth) {
      const auto stats = collect(open, grad, w);
      for (std::size_t s = 0; s < open.size(); ++s) {
        tree.nodes[static_cast<std::size_t>(open[s])].value = stats[s].w > 0.0 ? stats[s].g / stats[s].w : 0.0;
      }
      if (depth == cfg_.max_depth) break;
      const auto best = search(open, stats, grad, w);
      std::vector<int> next;
      for (std::size_t s = 0; s < open.size(); ++s) {
        if (best[s].feature < 0) continue;
        auto& node = tree.nodes[static_cast<std::size_t>(open[s])];
        node.feature = best[s].feature;
        node.threshold = best[s].threshold;
        node.missing_left = best[s].missing_left;
        node.left = static_cast<int>(tree.nodes.size());
        node.right = node.left + 1;
        next.push_back(node.left);
        next.push_back(node.right);
        tree.nodes.push_back(TreeNode{});
        tree.nodes.push_back(TreeNode{});
      }
      for (std::size_t i = 0; i < d_.n; ++i) {
        if (node_of_[i] < 0) continue;
        const auto& node = tree.nodes[static_cast<std::size_t>(node_of_[i])];
        if (node.feature < 0) {
          node_of_[i] = -1;  // settled in a leaf
          continue;
        }
        const double x = d_.row(i)[node.feature];
        node_of_[i] = (std::isnan(x) ? node.missing_left : x <= node.threshold) ? node.left : node.right;
      }
      open = std::move(next);
    }
    return tree;
  }

 private:
  std::vector<NodeStats> collect(const std::vector<int>& open, const std::vector<double>& grad,
                                 const std::vector<double>& w) {
    slot_.assign(node_count_hint(open), -1);
    for (std::size_t s = 0; s < open.size(); ++s) slot_[static_cast<std::size_t>(open[s])] = static_cast<int>(s);
    std::vector<NodeStats> stats(open.size());
    for (auto& st : stats) {
      st.gm.assign(d_.width, 0.0);
      st.wm.assign(d_.width, 0.0);
    }
    for (std::size_t i = 0; i < d_.n; ++i) {
      const int s = slot(i);
      if (s < 0) continue;
      auto& st = stats[static_cast<std::size_t>(s)];
      st.g += grad[i];
      st.w += w[i];
      const double* r = d_.row(i);
      for (std::size_t f = 0; f < d_.width; ++f) {
        if (std::isnan(r[f])) {
          st.gm[f] += grad[i];
          st.wm[f] += w[i];
        }
      }
    }
    return stats;
  }

  std::vector<Best> search(const std::vector<int>& open, const std::vector<NodeStats>& stats,
                           const std::vector<double>& grad, const std::vector<double>& w) const {
    std::vector<Best> best(open.size());
    struct Scan {
      double gl = 0.0, wl = 0.0, last = 0.0;
      bool has = false;
    };
    std::vector<Scan> scan(open.size());
    for (std::size_t f = 0; f < d_.width; ++f) {
      std::fill(scan.begin(), scan.end(), Scan{});
      for (auto i : sorted_[f]) {
        const int s = slot(i);
        if (s < 0) continue;
        auto& sc = scan[static_cast<std::size_t>(s)];
        const double x = d_.row(i)[f];
        if (sc.has && x != sc.last) {
          double thr = 0.5 * (sc.last + x);
          if (!(thr < x)) thr = sc.last;
          consider(best[static_cast<std::size_t>(s)], stats[static_cast<std::size_t>(s)], f, thr, sc.gl, sc.wl, false);
        }
        sc.gl += grad[i];
        sc.wl += w[i];
        sc.last = x;
        sc.has = true;
      }
      // Present-vs-missing split: every observed value left.
      for (std::size_t s = 0; s < open.size(); ++s) {
        if (scan[s].has && stats[s].wm[f] > 0.0) {
          consider(best[s], stats[s], f, scan[s].last, scan[s].gl, scan[s].wl, true);
        }
      }
    }
    return best;
  }

  // (gl, wl): observed samples at or below the threshold.
  void consider(Best& best, const NodeStats& st, std::size_t f, double thr, double gl, double wl,
                bool missing_only) const {
    const double gm = st.gm[f], wm = st.wm[f];
    const double gr = st.g - gm - gl, wr = st.w - wm - wl;
    const double parent = st.g * st.g / st.w;
    // Normalized weights can sit an ulp below 1; the floor allows for that.
    const double floor = cfg_.min_leaf_weight * (1.0 - 1e-9);
    const auto try_side = [&](double lg, double lw, double rg, double rw, bool missing_left) {
      if (lw < floor || rw < floor || !(lw > 0.0) || !(rw > 0.0)) return;
      const double gain = lg * lg / lw + rg * rg / rw - parent;
      if (gain > best.gain) best = {gain, static_cast<int>(f), thr, missing_left};
    };
    if (missing_only) {
      try_side(gl, wl, gm, wm, false);
    } else if (wm > 0.0) {
      try_side(gl + gm, wl + wm, gr, wr, true);
      try_side(gl, wl, gr + gm, wr + wm, false);
    } else {
      try_side(gl, wl, gr, wr, wl >= wr);
    }
  }

  int slot(std::size_t i) const {
    const int n = node_of_[i];
    return n < 0 || static_cast<std::size_t>(n) >= slot_.size() ? -1 : slot_[static_cast<std::size_t>(n)];
  }
  static std::size_t node_count_hint(const std::vector<int>& open) {
    return open.empty() ? 0 : static_cast<std::size_t>(*std::max_element(open.begin(), open.end())) + 1;
  }

  const Dataset& d_;
  const std::vector<std::vector<std::size_t>>& sorted_;
  const GbrtConfig& cfg_;
  std::vector<int> node_of_;
  std::vector<int> slot_;
};

}  // namespace

TreeEnsemble fit_gbrt(std::span<const GroupSample> samples, const GbrtConfig& cfg) {
  cfg.validate();
  TreeEnsemble model;
  model.schema = FeatureSchema::from_samples(samples);
  model.learning_rate = cfg.learning_rate;
  const Dataset d = design(samples, model.schema);

  // Weights rescaled to mean 1 so min_leaf_weight is scale free.
  const double mean_w = std::accumulate(d.w.begin(), d.w.end(), 0.0) / static_cast<double>(d.n);
  std::vector<double> w(d.n);
  for (std::size_t i = 0; i < d.n; ++i) w[i] = d.w[i] / mean_w;
  double wy = 0.0, ws = 0.0;
  for (std::size_t i = 0; i < d.n; ++i) {
    wy += w[i] * d.y[i];
    ws += w[i];
  }
  model.base_score = wy / ws;

  std::vector<std::vector<std::size_t>> sorted(d.width);
  for (std::size_t f = 0; f < d.width; ++f) {
    for (std::size_t i = 0; i < d.n; ++i) {
      if (!std::isnan(d.row(i)[f])) sorted[f].push_back(i);
    }
    std::sort(sorted[f].begin(), sorted[f].end(), [&](std::size_t a, std::size_t b) {
      const double xa = d.row(a)[f], xb = d.row(b)[f];
      return xa < xb || (xa == xb && a < b);
    });
  }

  std::vector<double> pred(d.n, model.base_score), grad(d.n);
  std::vector<char> in_bag(d.n, 1);
  TreeBuilder builder(d, sorted, cfg);
  for (int t = 0; t < cfg.n_trees; ++t) {
    if (cfg.subsample < 1.0) {
      std::vector<std::size_t> order(d.n);
      std::iota(order.begin(), order.end(), 0);
      Rng rng(derive_seed(cfg.seed, "rpc.gbrt.subsample", static_cast<std::uint64_t>(t)));
      shuffle(order.begin(), order.end(), rng);
      const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.subsample * static_cast<double>(d.n)));
      std::fill(in_bag.begin(), in_bag.end(), 0);
      for (std::size_t k = 0; k < keep; ++k) in_bag[order[k]] = 1;
    }
    for (std::size_t i = 0; i < d.n; ++i) grad[i] = w[i] * (d.y[i] - pred[i]);
    model.trees.push_back(builder.build(grad, w, in_bag));
    for (std::size_t i = 0; i < d.n; ++i) {
      pred[i] += cfg.learning_rate * model.trees.back().predict_row(std::span<const double>(d.row(i), d.width));
    }
  }
  return model;
}

std::string TreeEnsemble::serialize() const {
  std::ostringstream out;
  out << kGbrtMagic << ' ' << kModelVersion << '\n';
  write_schema(out, schema);
  out << "base_score " << csv::format_hex(base_score) << '\n';
  out << "learning_rate " << csv::format_hex(learning_rate) << '\n';
  out << "trees " << trees.size() << '\n';
  for (const auto& t : trees) {
    out << "tree " << t.nodes.size() << '\n';
    for (const auto& n : t.nodes) {
      out << "node " << n.feature << ' ' << csv::format_hex(n.threshold) << ' ' << (n.missing_left ? 1 : 0) << ' '
          << n.left << ' ' << n.right << ' ' << csv::format_hex(n.value) << '\n';
    }
  }
  out << "end\n";
  return out.str();
}

TreeEnsemble TreeEnsemble::deserialize(const std::string& text, const std::string& source) {
  LineReader r(text, source);
  check_magic(r, kGbrtMagic);
  TreeEnsemble m;
  m.schema = read_schema(r);
  const auto bs = r.expect("base_score");
  const auto lr = r.expect("learning_rate");
  const auto nt = r.expect("trees");
  if (bs.size() != 1 || lr.size() != 1 || nt.size() != 1) throw r.fail("malformed model header");
  m.base_score = csv::parse_hex(bs[0]);
  m.learning_rate = csv::parse_hex(lr[0]);
  const auto n_trees = r.count(nt[0]);
  const auto width = static_cast<long long>(m.schema.width());
  for (std::size_t t = 0; t < n_trees; ++t) {
    const auto th = r.expect("tree");
    if (th.size() != 1) throw r.fail("malformed tree header");
    const auto n_nodes = r.count(th[0]);
    if (n_nodes == 0) throw r.fail("empty tree");
    RegressionTree tree;
    for (std::size_t k = 0; k < n_nodes; ++k) {
      const auto f = r.expect("node");
      if (f.size() != 6) throw r.fail("malformed node");
      TreeNode n;
      n.feature = static_cast<int>(csv::parse_integer(f[0]));
      n.threshold = csv::parse_hex(f[1]);
      n.missing_left = f[2] == "1";
      n.left = static_cast<int>(csv::parse_integer(f[3]));
      n.right = static_cast<int>(csv::parse_integer(f[4]));
      n.value = csv::parse_hex(f[5]);
      if (n.feature >= 0) {
        // children always follow their parent, which rules out cycles
        const auto ok = [&](int c) { return c > static_cast<int>(k) && c < static_cast<int>(n_nodes); };
        if (n.feature >= width || !ok(n.left) || !ok(n.right)) throw r.fail("node references out of range");
      }
      tree.nodes.push_back(n);
    }
    m.trees.push_back(std::move(tree));
  }
  r.expect("end");
  return m;
}

// ---------------------------------------------------------------- common

double predict(const RpcModel& model, const FeatureVector& f) {
  return std::visit([&](const auto& m) { return m.predict(f); }, model);
}

std::string serialize_model(const RpcModel& model) {
  return std::visit([](const auto& m) { return m.serialize(); }, model);
}

RpcModel deserialize_model(const std::string& text, const std::string& source) {
  if (text.rfind(kLinearMagic, 0) == 0) return LinearModel::deserialize(text, source);
  if (text.rfind(kGbrtMagic, 0) == 0) return TreeEnsemble::deserialize(text, source);
  throw Error(source + ": not an RPC model file");
}

void save_model(const std::string& path, const RpcModel& model) { csv::write_text_file(path, serialize_model(model)); }

RpcModel load_model(const std::string& path) { return deserialize_model(csv::read_text_file(path), path); }

Score score(std::span<const double> preds, std::span<const double> y, std::span<const double> w) {
  if (preds.size() != y.size() || y.size() != w.size()) {
    throw Error("score: " + std::to_string(preds.size()) + " predictions for " + std::to_string(y.size()) +
                " responses");
  }
  double ws = 0.0, se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(w[i] >= 0.0)) throw Error("score: negative weight");
    const double e = preds[i] - y[i];
    ws += w[i];
    se += w[i] * e * e;
    ae += w[i] * std::abs(e);
  }
  if (!(ws > 0.0)) throw Error("score: total weight is zero");
  return {se / ws, ae / ws};
}

Score score(std::span<const double> preds, std::span<const GroupSample> samples) {
  std::vector<double> y, w;
  for (const auto& s : samples) {
    if (!s.rpc) throw Error("score: sample '" + s.group_id + "' has no response");
    y.push_back(*s.rpc);
    w.push_back(s.clicks_weight);
  }
  return score(preds, y, w);
}

SplitIndices split_indices(std::size_t n, std::uint64_t seed, double val_ratio, double test_ratio) {
  if (n < 10) throw Error("split needs at least 10 samples, got " + std::to_string(n));
  if (!(val_ratio >= 0.0 && test_ratio >= 0.0 && val_ratio + test_ratio < 1.0)) {
    throw Error("split ratios must be non-negative and leave room for training");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "rpc.split");
  shuffle(order.begin(), order.end(), rng);
  const auto nv = static_cast<std::size_t>(std::floor(val_ratio * static_cast<double>(n) + 1e-9));
  const auto nt = static_cast<std::size_t>(std::floor(test_ratio * static_cast<double>(n) + 1e-9));
  const std::size_t ntr = n - nv - nt;
  SplitIndices s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(ntr));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(ntr), order.begin() + static_cast<std::ptrdiff_t>(ntr + nv));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(ntr + nv), order.end());
  return s;
}

void write_predictions(const std::string& path, const std::vector<std::pair<std::string, double>>& preds) {
  csv::Writer w(path);
  w.row({"group_id", "rpc_pred"});
  for (const auto& [id, p] : preds) w.row({id, csv::format_double(p)});
  w.close();
}

std::vector<std::pair<std::string, double>> read_predictions(const std::string& path) {
  const auto t = csv::read_file(path);
  csv::require_header(t, {"group_id", "rpc_pred"});
  csv::require_rectangular(t);
  std::vector<std::pair<std::string, double>> out;
  for (const auto& row : t.rows) {
    try {
      out.emplace_back(row.fields[0], csv::parse_double(row.fields[1]));
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(path, row.line, "rpc_pred", e.what());
    }
  }
  return out;
}

}  // namespace sembid
