#include "prepadj/boosting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <tuple>

#include "prepadj/core.hpp"
#include "prepadj/metrics.hpp"

namespace prepadj {

// ---------------------------------------------------------------------------
// Parameters

nlohmann::json BoostParams::to_json() const {
  return {{"max_depth", max_depth},
          {"eta", eta},
          {"min_child_weight", min_child_weight},
          {"gamma", gamma},
          {"max_delta_step", max_delta_step},
          {"lambda", lambda},
          {"rounds", rounds},
          {"patience", patience},
          {"max_bins", max_bins}};
}

BoostParams BoostParams::from_json(const nlohmann::json& j) {
  BoostParams p;
  p.max_depth = j.value("max_depth", p.max_depth);
  p.eta = j.value("eta", p.eta);
  p.min_child_weight = j.value("min_child_weight", p.min_child_weight);
  p.gamma = j.value("gamma", p.gamma);
  p.max_delta_step = j.value("max_delta_step", p.max_delta_step);
  p.lambda = j.value("lambda", p.lambda);
  p.rounds = j.value("rounds", p.rounds);
  p.patience = j.value("patience", p.patience);
  p.max_bins = j.value("max_bins", p.max_bins);
  return p;
}

std::vector<BoostParams> HyperGrid::expand(const BoostParams& base) const {
  std::vector<BoostParams> out;
  for (int d : max_depth)
    for (double e : eta)
      for (double m : min_child_weight)
        for (double g : gamma)
          for (double s : max_delta_step) {
            BoostParams p = base;
            p.max_depth = d;
            p.eta = e;
            p.min_child_weight = m;
            p.gamma = g;
            p.max_delta_step = s;
            out.push_back(p);
          }
  return out;
}

nlohmann::json HyperGrid::to_json() const {
  return {{"max_depth", max_depth},
          {"eta", eta},
          {"min_child_weight", min_child_weight},
          {"gamma", gamma},
          {"max_delta_step", max_delta_step},
          {"folds", folds}};
}

HyperGrid HyperGrid::from_json(const nlohmann::json& j) {
  HyperGrid g;
  g.max_depth = j.value("max_depth", g.max_depth);
  g.eta = j.value("eta", g.eta);
  g.min_child_weight = j.value("min_child_weight", g.min_child_weight);
  g.gamma = j.value("gamma", g.gamma);
  g.max_delta_step = j.value("max_delta_step", g.max_delta_step);
  g.folds = j.value("folds", g.folds);
  return g;
}

// ---------------------------------------------------------------------------
// Feature metadata and binning

namespace {

std::vector<double> quantile_cuts(std::vector<double> values, int max_bins) {
  values.erase(std::remove_if(values.begin(), values.end(),
                              [](double v) { return std::isnan(v); }),
               values.end());
  std::sort(values.begin(), values.end());
  std::vector<double> distinct;
  for (double v : values) {
    if (distinct.empty() || v != distinct.back()) distinct.push_back(v);
  }
  std::vector<double> cuts;
  if (distinct.size() <= 1) return cuts;
  if (distinct.size() <= static_cast<std::size_t>(max_bins)) {
    for (std::size_t i = 1; i < distinct.size(); ++i) {
      cuts.push_back(0.5 * (distinct[i - 1] + distinct[i]));
    }
    return cuts;
  }
  const std::size_t n = values.size();
  for (int b = 1; b < max_bins; ++b) {
    const double q = values[static_cast<std::size_t>(
        static_cast<double>(b) * static_cast<double>(n) / max_bins)];
    if (q > values.front() && (cuts.empty() || q > cuts.back())) cuts.push_back(q);
  }
  return cuts;
}

const Factor& factor_for(const CohortTable& table, const FeatureSpec& f,
                         const Covariate** cov_out) {
  *cov_out = nullptr;
  switch (f.source) {
    case FeatureSource::Stratum: return table.stratum;
    case FeatureSource::Group: return table.group;
    case FeatureSource::Covariate: {
      const Covariate& c = table.covariate(f.name);
      *cov_out = &c;
      return c.categorical;
    }
  }
  return table.group;
}

}  // namespace

std::vector<FeatureSpec> build_features(const CohortTable& table,
                                        const FeatureSelection& selection,
                                        int max_bins) {
  if (max_bins < 2 || max_bins > 65535) throw DataError("max_bins outside [2, 65535]");
  std::vector<FeatureSpec> out;
  std::vector<std::string> names = selection.covariates;
  if (names.empty()) {
    for (const auto& c : table.covariates) names.push_back(c.name);
  }
  for (const auto& name : names) {
    const Covariate& cov = table.covariate(name);
    FeatureSpec f;
    f.name = name;
    f.source = FeatureSource::Covariate;
    if (cov.kind == CovariateKind::Numeric) {
      f.categorical = false;
      f.cuts = quantile_cuts(cov.numeric, max_bins);
    } else {
      f.categorical = true;
      f.levels = cov.categorical.levels;
    }
    out.push_back(std::move(f));
  }
  if (selection.include_stratum) {
    FeatureSpec f;
    f.name = "stratum";
    f.source = FeatureSource::Stratum;
    f.categorical = true;
    f.levels = table.stratum.levels;
    out.push_back(std::move(f));
  }
  if (selection.include_group) {
    FeatureSpec f;
    f.name = "group";
    f.source = FeatureSource::Group;
    f.categorical = true;
    f.levels = table.group.levels;
    out.push_back(std::move(f));
  }
  return out;
}

namespace {

BinnedData encode_with(const std::vector<FeatureSpec>& features,
                       const CohortTable& table, std::vector<std::string>* warnings) {
  BinnedData d;
  d.rows = table.size();
  d.features = features.size();
  d.bins.resize(d.rows * d.features);
  d.offsets.resize(d.features);
  std::uint32_t offset = 0;
  for (std::size_t f = 0; f < d.features; ++f) {
    d.offsets[f] = offset;
    offset += static_cast<std::uint32_t>(features[f].n_bins());
  }
  for (std::size_t f = 0; f < d.features; ++f) {
    const FeatureSpec& spec = features[f];
    if (!spec.categorical) {
      const auto& values = table.covariate(spec.name).numeric;
      for (std::size_t i = 0; i < d.rows; ++i) {
        const double x = values[i];
        std::uint16_t b = 0;
        if (!std::isnan(x)) {
          b = static_cast<std::uint16_t>(
              std::upper_bound(spec.cuts.begin(), spec.cuts.end(), x) -
              spec.cuts.begin());
        }
        d.bins[i * d.features + f] = b;
      }
      continue;
    }
    const Covariate* cov = nullptr;
    const Factor& factor = factor_for(table, spec, &cov);
    if (cov && cov->kind != CovariateKind::Categorical) {
      throw DataError("feature '" + spec.name + "' is categorical in the model but numeric in the table");
    }
    // Map table level codes onto model level codes.
    const int fallback_level = [&] {
      auto it = std::find(spec.levels.begin(), spec.levels.end(), kMissingLevel);
      return it == spec.levels.end() ? static_cast<int>(spec.levels.size())
                                     : static_cast<int>(it - spec.levels.begin());
    }();
    std::vector<int> remap(factor.levels.size());
    std::vector<bool> unseen(factor.levels.size(), false);
    for (std::size_t l = 0; l < factor.levels.size(); ++l) {
      auto it = std::find(spec.levels.begin(), spec.levels.end(), factor.levels[l]);
      if (it == spec.levels.end()) {
        remap[l] = fallback_level;
        unseen[l] = true;
      } else {
        remap[l] = static_cast<int>(it - spec.levels.begin());
      }
    }
    std::vector<bool> reported(factor.levels.size(), false);
    for (std::size_t i = 0; i < d.rows; ++i) {
      const int code = factor.codes[i];
      int b = fallback_level;
      if (code >= 0) {
        b = remap[static_cast<std::size_t>(code)];
        if (unseen[static_cast<std::size_t>(code)] && !reported[static_cast<std::size_t>(code)]) {
          reported[static_cast<std::size_t>(code)] = true;
          const std::string msg = "feature '" + spec.name + "': unseen level '" +
                                  factor.levels[static_cast<std::size_t>(code)] +
                                  "' mapped to the missing level";
          if (warnings) warnings->push_back(msg);
          warn(msg);
        }
      }
      d.bins[i * d.features + f] = static_cast<std::uint16_t>(b);
    }
  }
  return d;
}

double tree_value(const Tree& tree, const std::vector<FeatureSpec>& features,
                  const std::uint16_t* row) {
  int node = 0;
  for (;;) {
    const TreeNode& nd = tree.nodes[static_cast<std::size_t>(node)];
    if (nd.feature < 0) return nd.value;
    const auto f = static_cast<std::size_t>(nd.feature);
    const int b = row[f];
    const bool go_left = features[f].categorical ? b == nd.split_bin : b <= nd.split_bin;
    node = go_left ? nd.left : nd.right;
  }
}

// Depth-wise histogram tree grower over a binned matrix.
class TreeGrower {
 public:
  TreeGrower(const BinnedData& data, const std::vector<FeatureSpec>& features,
             const BoostParams& params)
      : data_(data), features_(features), params_(params) {
    total_bins_ = 0;
    for (const auto& f : features_) total_bins_ += static_cast<std::size_t>(f.n_bins());
  }

  // Grows one tree on rows[0..n) with the given gradients; adds the leaf
  // values to `margin` for those rows.
  Tree grow(std::vector<std::uint32_t>& rows, const std::vector<double>& grad,
            const std::vector<double>& hess, std::vector<double>& margin) {
    Tree tree;
    struct Work {
      int node;
      std::size_t begin, end;
      std::vector<double> hist;
      double g, h;
    };
    Work root{0, 0, rows.size(), build_hist(rows, 0, rows.size(), grad, hess), 0, 0};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      root.g += grad[rows[i]];
      root.h += hess[rows[i]];
    }
    tree.nodes.emplace_back();
    std::vector<Work> frontier;
    frontier.push_back(std::move(root));
    std::vector<Work> leaves;

    for (int depth = 0; depth < params_.max_depth && !frontier.empty(); ++depth) {
      std::vector<Work> next;
      for (auto& w : frontier) {
        const Split s = best_split(w.hist, w.g, w.h);
        if (s.feature < 0) {
          leaves.push_back(std::move(w));
          continue;
        }
        const FeatureSpec& spec = features_[static_cast<std::size_t>(s.feature)];
        const auto f = static_cast<std::size_t>(s.feature);
        auto mid = std::stable_partition(
            rows.begin() + static_cast<std::ptrdiff_t>(w.begin),
            rows.begin() + static_cast<std::ptrdiff_t>(w.end),
            [&](std::uint32_t r) {
              const int b = data_.row(r)[f];
              return spec.categorical ? b == s.bin : b <= s.bin;
            });
        const auto split_at = static_cast<std::size_t>(mid - rows.begin());

        const int left_id = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        TreeNode& nd = tree.nodes[static_cast<std::size_t>(w.node)];
        nd.feature = s.feature;
        nd.split_bin = s.bin;
        nd.threshold = spec.categorical ? 0.0 : spec.cuts[static_cast<std::size_t>(s.bin)];
        nd.left = left_id;
        nd.right = left_id + 1;

        Work left{left_id, w.begin, split_at, {}, s.gl, s.hl};
        Work right{left_id + 1, split_at, w.end, {}, w.g - s.gl, w.h - s.hl};
        // Build the smaller child's histogram, derive the larger by subtraction.
        Work& small = (split_at - w.begin) <= (w.end - split_at) ? left : right;
        Work& large = &small == &left ? right : left;
        small.hist = build_hist(rows, small.begin, small.end, grad, hess);
        large.hist = std::move(w.hist);
        for (std::size_t k = 0; k < large.hist.size(); ++k) large.hist[k] -= small.hist[k];
        next.push_back(std::move(left));
        next.push_back(std::move(right));
      }
      frontier = std::move(next);
    }
    for (auto& w : frontier) leaves.push_back(std::move(w));

    for (const auto& w : leaves) {
      double v = -w.g / (w.h + params_.lambda);
      if (params_.max_delta_step > 0) {
        v = std::clamp(v, -params_.max_delta_step, params_.max_delta_step);
      }
      v *= params_.eta;
      tree.nodes[static_cast<std::size_t>(w.node)].value = v;
      for (std::size_t i = w.begin; i < w.end; ++i) margin[rows[i]] += v;
    }
    return tree;
  }

 private:
  struct Split {
    int feature = -1;
    int bin = 0;
    double gain = 0;
    double gl = 0, hl = 0;
  };

  std::vector<double> build_hist(const std::vector<std::uint32_t>& rows,
                                 std::size_t begin, std::size_t end,
                                 const std::vector<double>& grad,
                                 const std::vector<double>& hess) const {
    std::vector<double> hist(2 * total_bins_, 0.0);
    const std::size_t nf = data_.features;
    const std::uint32_t* offsets = data_.offsets.data();
    for (std::size_t i = begin; i < end; ++i) {
      const std::uint32_t r = rows[i];
      const std::uint16_t* b = data_.row(r);
      const double g = grad[r], h = hess[r];
      for (std::size_t f = 0; f < nf; ++f) {
        double* slot = hist.data() + 2 * (offsets[f] + b[f]);
        slot[0] += g;
        slot[1] += h;
      }
    }
    return hist;
  }

  double score(double g, double h) const { return g * g / (h + params_.lambda); }

  Split best_split(const std::vector<double>& hist, double g, double h) const {
    Split best;
    const double parent = score(g, h);
    const double mcw = params_.min_child_weight;
    for (std::size_t f = 0; f < features_.size(); ++f) {
      const FeatureSpec& spec = features_[f];
      const double* slot = hist.data() + 2 * data_.offsets[f];
      const int nb = spec.n_bins();
      if (spec.categorical) {
        // The trailing bin holds unseen/missing codes and is never split off.
        for (int b = 0; b < nb - 1; ++b) {
          const double gl = slot[2 * b], hl = slot[2 * b + 1];
          const double hr = h - hl;
          if (hl < mcw || hr < mcw) continue;
          const double gain =
              0.5 * (score(gl, hl) + score(g - gl, hr) - parent) - params_.gamma;
          if (gain > best.gain) best = {static_cast<int>(f), b, gain, gl, hl};
        }
      } else {
        double gl = 0, hl = 0;
        for (int b = 0; b < nb - 1; ++b) {
          gl += slot[2 * b];
          hl += slot[2 * b + 1];
          const double hr = h - hl;
          if (hl < mcw || hr < mcw) continue;
          const double gain =
              0.5 * (score(gl, hl) + score(g - gl, hr) - parent) - params_.gamma;
          if (gain > best.gain) best = {static_cast<int>(f), b, gain, gl, hl};
        }
      }
    }
    return best;
  }

  const BinnedData& data_;
  const std::vector<FeatureSpec>& features_;
  const BoostParams& params_;
  std::size_t total_bins_ = 0;
};

void check_params(const BoostParams& p) {
  if (p.rounds <= 0) throw DataError("boosting rounds must be positive");
  if (p.max_depth < 1) throw DataError("max_depth must be at least 1");
  if (!(p.eta > 0)) throw DataError("eta must be positive");
  if (p.lambda < 0 || p.gamma < 0 || p.min_child_weight < 0 || p.max_delta_step < 0) {
    throw DataError("boosting penalties must be nonnegative");
  }
}

// Core boosting loop over row subsets of one binned matrix.
struct BoostOutcome {
  double base_score = 0;
  std::vector<Tree> trees;
  int best_rounds = 0;
  double best_auc = -1;
};

BoostOutcome boost(const BinnedData& data, const std::vector<FeatureSpec>& features,
                   std::span<const std::uint8_t> labels,
                   std::vector<std::uint32_t> train_rows,
                   const std::vector<std::uint32_t>* val_rows, const BoostParams& params) {
  check_params(params);
  double positives = 0;
  for (auto r : train_rows) positives += labels[r];
  const double n = static_cast<double>(train_rows.size());
  if (train_rows.empty() || positives == 0 || positives == n) {
    throw NumericalError("degenerate target: training labels contain a single class");
  }
  BoostOutcome out;
  out.base_score = logit(positives / n);

  std::vector<double> margin(data.rows, out.base_score);
  std::vector<double> grad(data.rows, 0.0), hess(data.rows, 0.0);
  TreeGrower grower(data, features, params);

  std::vector<double> val_margin;
  std::vector<std::uint8_t> val_labels;
  std::vector<double> val_scores;
  if (val_rows) {
    val_margin.assign(val_rows->size(), out.base_score);
    for (auto r : *val_rows) val_labels.push_back(labels[r]);
  }

  for (int round = 0; round < params.rounds; ++round) {
    for (auto r : train_rows) {
      const double p = logistic(margin[r]);
      grad[r] = p - labels[r];
      hess[r] = std::max(p * (1.0 - p), 1e-16);
    }
    // grow() reorders its row buffer; a copy keeps the partition local.
    std::vector<std::uint32_t> rows = train_rows;
    out.trees.push_back(grower.grow(rows, grad, hess, margin));

    if (!val_rows) continue;
    const Tree& t = out.trees.back();
    for (std::size_t i = 0; i < val_rows->size(); ++i) {
      val_margin[i] += tree_value(t, features, data.row((*val_rows)[i]));
    }
    const double a = auc(val_margin, val_labels);
    if (a > out.best_auc) {
      out.best_auc = a;
      out.best_rounds = round + 1;
    } else if (round + 1 - out.best_rounds >= params.patience) {
      break;
    }
  }
  if (val_rows) {
    out.trees.resize(static_cast<std::size_t>(out.best_rounds));
  } else {
    out.best_rounds = static_cast<int>(out.trees.size());
  }
  return out;
}

std::vector<std::uint8_t> passed_labels(const CohortTable& t) { return t.passed; }

}  // namespace

// ---------------------------------------------------------------------------
// Model

BinnedData BoostedModel::encode(const CohortTable& table,
                                std::vector<std::string>* warnings) const {
  return encode_with(features, table, warnings);
}

namespace {

// A tree re-laid as a complete binary tree of fixed depth so traversal is a
// fixed number of branch-free steps. Internal node k has children 2k+1 and
// 2k+2; padding nodes route every row left (threshold = max bin).
struct CompleteTree {
  int depth = 0;
  std::vector<std::uint16_t> feature;
  std::vector<std::uint16_t> split;
  std::vector<std::uint8_t> categorical;
  std::vector<double> leaf;  // 2^depth leaf values
};

int tree_depth(const Tree& t, int node) {
  const TreeNode& nd = t.nodes[static_cast<std::size_t>(node)];
  if (nd.feature < 0) return 0;
  return 1 + std::max(tree_depth(t, nd.left), tree_depth(t, nd.right));
}

CompleteTree complete_tree(const Tree& t, const std::vector<FeatureSpec>& features) {
  CompleteTree c;
  c.depth = tree_depth(t, 0);
  const std::size_t internal = (std::size_t{1} << c.depth) - 1;
  c.feature.assign(internal, 0);
  c.split.assign(internal, 0xFFFF);
  c.categorical.assign(internal, 0);
  c.leaf.assign(std::size_t{1} << c.depth, 0.0);
  // (original node, complete index, level)
  std::vector<std::tuple<int, std::size_t, int>> stack = {{0, 0, 0}};
  while (!stack.empty()) {
    auto [node, idx, level] = stack.back();
    stack.pop_back();
    const TreeNode& nd = t.nodes[static_cast<std::size_t>(node)];
    if (level == c.depth) {
      c.leaf[idx - internal] = nd.value;
      continue;
    }
    if (nd.feature < 0) {
      // Padding: always left, carrying the leaf down.
      stack.emplace_back(node, 2 * idx + 1, level + 1);
      continue;
    }
    c.feature[idx] = static_cast<std::uint16_t>(nd.feature);
    c.split[idx] = static_cast<std::uint16_t>(nd.split_bin);
    c.categorical[idx] = features[static_cast<std::size_t>(nd.feature)].categorical ? 1 : 0;
    stack.emplace_back(nd.left, 2 * idx + 1, level + 1);
    stack.emplace_back(nd.right, 2 * idx + 2, level + 1);
  }
  return c;
}

}  // namespace

Eigen::VectorXd BoostedModel::predict_margin(const BinnedData& data) const {
  // Tree-major so each tree stays in cache; rows accumulate in tree order.
  Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(data.rows));
  for (const auto& t : trees) {
    const CompleteTree c = complete_tree(t, features);
    const std::size_t internal = c.feature.size();
    for (std::size_t i = 0; i < data.rows; ++i) {
      const std::uint16_t* row = data.row(i);
      std::size_t k = 0;
      for (int level = 0; level < c.depth; ++level) {
        const unsigned b = row[c.feature[k]];
        const unsigned s = c.split[k];
        // Categorical: level == s goes left; numeric: bin <= s goes left.
        const unsigned left = static_cast<unsigned>(b == s) |
                              (static_cast<unsigned>(b < s) & (c.categorical[k] ^ 1u));
        k = 2 * k + 2 - left;
      }
      m[static_cast<Eigen::Index>(i)] += c.leaf[k - internal];
    }
  }
  return (m.array() + base_score).matrix();
}

Eigen::VectorXd BoostedModel::predict(const CohortTable& table,
                                      std::vector<std::string>* warnings) const {
  const Eigen::VectorXd m = predict_margin(encode(table, warnings));
  return clip_probability_array(logistic_array(m.array())).matrix();
}

Eigen::VectorXd predict_mu(const PreparednessModel& model, const CohortTable& table,
                           std::vector<std::string>* warnings) {
  return model.predict(table, warnings);
}

namespace {

nlohmann::json cv_row_json(const CvRow& r) {
  return {{"params", r.params.to_json()},
          {"fold_auc", r.fold_auc},
          {"fold_best_rounds", r.fold_best_rounds},
          {"mean_auc", r.mean_auc},
          {"rounds", r.rounds}};
}

CvRow cv_row_from(const nlohmann::json& j) {
  CvRow r;
  r.params = BoostParams::from_json(j.at("params"));
  r.fold_auc = j.at("fold_auc").get<std::vector<double>>();
  r.fold_best_rounds = j.at("fold_best_rounds").get<std::vector<int>>();
  r.mean_auc = j.at("mean_auc").get<double>();
  r.rounds = j.at("rounds").get<int>();
  return r;
}

const char* source_name(FeatureSource s) {
  switch (s) {
    case FeatureSource::Covariate: return "covariate";
    case FeatureSource::Stratum: return "stratum";
    case FeatureSource::Group: return "group";
  }
  return "covariate";
}

}  // namespace

nlohmann::json BoostedModel::to_json() const {
  nlohmann::json feats = nlohmann::json::array();
  for (const auto& f : features) {
    nlohmann::json jf = {{"name", f.name},
                         {"source", source_name(f.source)},
                         {"kind", f.categorical ? "categorical" : "numeric"}};
    if (f.categorical) jf["levels"] = f.levels;
    else jf["cuts"] = f.cuts;
    feats.push_back(std::move(jf));
  }
  nlohmann::json jtrees = nlohmann::json::array();
  for (const auto& t : trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& nd : t.nodes) {
      if (nd.feature < 0) {
        nodes.push_back({{"leaf", nd.value}});
      } else {
        nodes.push_back({{"feature", nd.feature},
                         {"bin", nd.split_bin},
                         {"threshold", nd.threshold},
                         {"left", nd.left},
                         {"right", nd.right}});
      }
    }
    jtrees.push_back(std::move(nodes));
  }
  nlohmann::json cv = nlohmann::json::array();
  for (const auto& r : report.cv) cv.push_back(cv_row_json(r));
  return {{"format", "prepadj-boosted-trees"},
          {"version", 1},
          {"base_score", base_score},
          {"learning_rate", learning_rate},
          {"features", feats},
          {"trees", jtrees},
          {"training_report",
           {{"params", report.params.to_json()},
            {"seed", report.seed},
            {"n_train", report.n_train},
            {"train_prevalence", report.train_prevalence},
            {"holdout_auc", report.holdout_auc},
            {"best_rounds", report.best_rounds},
            {"cv", cv}}}};
}

BoostedModel BoostedModel::from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "prepadj-boosted-trees") {
    throw DataError("not a boosted-trees model document");
  }
  if (j.value("version", 0) != 1) throw DataError("unsupported model version");
  BoostedModel m;
  m.base_score = j.at("base_score").get<double>();
  m.learning_rate = j.at("learning_rate").get<double>();
  for (const auto& jf : j.at("features")) {
    FeatureSpec f;
    f.name = jf.at("name").get<std::string>();
    const std::string src = jf.at("source").get<std::string>();
    f.source = src == "stratum" ? FeatureSource::Stratum
               : src == "group" ? FeatureSource::Group
                                : FeatureSource::Covariate;
    f.categorical = jf.at("kind").get<std::string>() == "categorical";
    if (f.categorical) f.levels = jf.at("levels").get<std::vector<std::string>>();
    else f.cuts = jf.at("cuts").get<std::vector<double>>();
    m.features.push_back(std::move(f));
  }
  for (const auto& jt : j.at("trees")) {
    Tree t;
    for (const auto& jn : jt) {
      TreeNode nd;
      if (jn.contains("leaf")) {
        nd.value = jn.at("leaf").get<double>();
      } else {
        nd.feature = jn.at("feature").get<int>();
        nd.split_bin = jn.at("bin").get<int>();
        nd.threshold = jn.at("threshold").get<double>();
        nd.left = jn.at("left").get<int>();
        nd.right = jn.at("right").get<int>();
      }
      t.nodes.push_back(nd);
    }
    m.trees.push_back(std::move(t));
  }
  const auto& r = j.at("training_report");
  m.report.params = BoostParams::from_json(r.at("params"));
  m.report.seed = r.at("seed").get<std::uint64_t>();
  m.report.n_train = r.at("n_train").get<std::size_t>();
  m.report.train_prevalence = r.at("train_prevalence").get<double>();
  m.report.holdout_auc = r.at("holdout_auc").get<double>();
  m.report.best_rounds = r.at("best_rounds").get<int>();
  for (const auto& jr : r.at("cv")) m.report.cv.push_back(cv_row_from(jr));
  return m;
}

// ---------------------------------------------------------------------------
// Fitting

BoostedModel train_booster(const CohortTable& table,
                           std::span<const std::uint8_t> labels,
                           const FeatureSelection& selection,
                           const BoostParams& params, const CohortTable* validation,
                           std::span<const std::uint8_t> validation_labels) {
  if (labels.size() != table.size()) throw DataError("labels do not match the table");
  BoostedModel model;
  model.features = build_features(table, selection, params.max_bins);
  model.learning_rate = params.eta;

  BinnedData data = encode_with(model.features, table, nullptr);
  std::vector<std::uint8_t> all_labels(labels.begin(), labels.end());
  std::vector<std::uint32_t> train_rows(table.size());
  std::iota(train_rows.begin(), train_rows.end(), 0u);
  std::vector<std::uint32_t> val_rows;
  if (validation) {
    if (validation_labels.size() != validation->size()) {
      throw DataError("validation labels do not match the validation table");
    }
    // Stack validation rows under the training rows in one binned matrix.
    BinnedData vdata = encode_with(model.features, *validation, nullptr);
    data.bins.insert(data.bins.end(), vdata.bins.begin(), vdata.bins.end());
    for (std::size_t i = 0; i < validation->size(); ++i) {
      val_rows.push_back(static_cast<std::uint32_t>(data.rows + i));
    }
    data.rows += vdata.rows;
    all_labels.insert(all_labels.end(), validation_labels.begin(), validation_labels.end());
  }
  BoostOutcome res = boost(data, model.features, all_labels, std::move(train_rows),
                           validation ? &val_rows : nullptr, params);
  model.base_score = res.base_score;
  model.trees = std::move(res.trees);
  model.report.params = params;
  model.report.n_train = table.size();
  model.report.train_prevalence = logistic(res.base_score);
  model.report.best_rounds = res.best_rounds;
  return model;
}

PreparednessModel fit_boosted(const CohortTable& train, const FeatureSelection& selection,
                              const BoostParams& params, std::uint64_t seed) {
  if (selection.include_group) {
    throw DataError("the group column cannot be a preparedness feature");
  }
  for (const auto& name : selection.covariates) {
    if (name == "group") throw DataError("the group column cannot be a preparedness feature");
  }
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (!(train.decision[i] == 1 && train.assessed[i] == 1)) {
      throw DataError("preparedness model must be trained on Complete units only");
    }
  }
  PreparednessModel m = train_booster(train, passed_labels(train), selection, params);
  m.report.seed = seed;
  return m;
}

std::vector<int> make_folds(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 2) throw DataError("cross-validation needs at least 2 folds");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold(n);
  for (std::size_t i = 0; i < n; ++i) fold[order[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
  return fold;
}

CvResult cv_select(const CohortTable& train, std::span<const std::uint8_t> labels,
                   const FeatureSelection& selection, const HyperGrid& grid,
                   const BoostParams& base, std::uint64_t seed, int threads) {
  const std::vector<BoostParams> points = grid.expand(base);
  if (points.empty()) throw DataError("hyperparameter grid is empty");
  if (labels.size() != train.size()) throw DataError("labels do not match the table");

  auto folds_ok = [&](const std::vector<int>& fold) {
    for (int k = 0; k < grid.folds; ++k) {
      std::size_t pos = 0, cnt = 0, tpos = 0, tcnt = 0;
      for (std::size_t i = 0; i < fold.size(); ++i) {
        if (fold[i] == k) {
          ++cnt;
          pos += labels[i];
        } else {
          ++tcnt;
          tpos += labels[i];
        }
      }
      if (pos == 0 || pos == cnt || tpos == 0 || tpos == tcnt) return false;
    }
    return true;
  };
  std::vector<int> fold = make_folds(train.size(), grid.folds, seed);
  if (!folds_ok(fold)) {
    fold = make_folds(train.size(), grid.folds, mix_seed(seed, 1));
    if (!folds_ok(fold)) {
      throw NumericalError("cross-validation fold contains a single class after reshuffling");
    }
  }

  // One binning over all training rows; folds index into it.
  const std::vector<FeatureSpec> features = build_features(train, selection, base.max_bins);
  const BinnedData data = encode_with(features, train, nullptr);

  CvResult result;
  result.table.resize(points.size());
  parallel_for(points.size(), threads, [&](std::size_t pi) {
    const BoostParams& p = points[pi];
    CvRow row;
    row.params = p;
    for (int k = 0; k < grid.folds; ++k) {
      std::vector<std::uint32_t> tr, va;
      for (std::size_t i = 0; i < fold.size(); ++i) {
        (fold[i] == k ? va : tr).push_back(static_cast<std::uint32_t>(i));
      }
      const BoostOutcome o = boost(data, features, labels, std::move(tr), &va, p);
      row.fold_auc.push_back(o.best_auc);
      row.fold_best_rounds.push_back(o.best_rounds);
    }
    row.mean_auc = std::accumulate(row.fold_auc.begin(), row.fold_auc.end(), 0.0) /
                   static_cast<double>(row.fold_auc.size());
    const double mean_rounds =
        std::accumulate(row.fold_best_rounds.begin(), row.fold_best_rounds.end(), 0.0) /
        static_cast<double>(row.fold_best_rounds.size());
    row.rounds = std::max(1, static_cast<int>(std::lround(mean_rounds)));
    result.table[pi] = std::move(row);
  });

  std::size_t best = 0;
  for (std::size_t i = 1; i < result.table.size(); ++i) {
    const CvRow& a = result.table[i];
    const CvRow& b = result.table[best];
    if (a.mean_auc > b.mean_auc) {
      best = i;
    } else if (a.mean_auc == b.mean_auc) {
      if (a.params.max_depth < b.params.max_depth ||
          (a.params.max_depth == b.params.max_depth && a.params.eta < b.params.eta)) {
        best = i;
      }
    }
  }
  result.chosen_index = best;
  result.chosen = result.table[best].params;
  result.chosen.rounds = result.table[best].rounds;
  return result;
}

}  // namespace prepadj
