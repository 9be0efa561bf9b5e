#pragma once

// Evaluation protocols over trained agents.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "patchgame/agents.hpp"
#include "patchgame/augment.hpp"
#include "patchgame/corpus.hpp"
#include "patchgame/image.hpp"
#include "patchgame/loss.hpp"
#include "patchgame/nn.hpp"
#include "patchgame/optim.hpp"
#include "patchgame/softrank.hpp"

namespace patchgame {

// Messages and image embeddings for a list of images, computed in chunks.
template <class T>
struct Encoded {
  std::vector<std::vector<Token>> messages;
  std::vector<std::vector<T>> text;      // unit d-vectors
  std::vector<std::vector<T>> image;     // unit d-vectors
  std::vector<std::vector<T>> features;  // pre-projection image features
  std::vector<std::vector<T>> scores;    // PatchRank scores
  std::vector<std::vector<std::size_t>> symbols;  // hard symbol ids of every patch, kept or not
};

template <class T>
Encoded<T> encode_images(const Agents<T>& agents, std::span<const LabeledImage* const> images, double tau_s,
                         std::uint64_t seed, std::size_t chunk = 64) {
  NoGradGuard ng;
  Encoded<T> out;
  const auto& g = agents.config().grid;
  auto rows = [](const Tensor<T>& t, std::vector<std::vector<T>>& dst) {
    const std::size_t n = t.dim(0), w = t.numel() / n;
    for (std::size_t i = 0; i < n; ++i) dst.emplace_back(t.data().begin() + i * w, t.data().begin() + (i + 1) * w);
  };
  for (std::size_t begin = 0; begin < images.size(); begin += chunk) {
    const std::size_t end = std::min(images.size(), begin + chunk);
    std::vector<std::span<const float>> views;
    for (std::size_t i = begin; i < end; ++i) views.push_back(images[i]->view());
    auto x = nhwc_batch<T>(views, g);
    Rng rng(derive_seed(seed, "encode", begin));
    auto msg = agents.speak(x, tau_s, rng, true);
    std::vector<std::vector<Token>> seqs;
    for (std::size_t b = 0; b < msg.batch; ++b) {
      seqs.push_back(msg.tokens(b));
      out.symbols.emplace_back(msg.symbol_ids.begin() + b * msg.length(), msg.symbol_ids.begin() + (b + 1) * msg.length());
    }
    rows(agents.embed_tokens(seqs), out.text);
    auto enc = agents.embed_image(x);
    rows(enc.embedding, out.image);
    rows(enc.features, out.features);
    rows(msg.scores, out.scores);
    for (auto& s : seqs) out.messages.push_back(std::move(s));
  }
  return out;
}

inline std::vector<const LabeledImage*> pointers(const std::vector<LabeledImage>& images) {
  std::vector<const LabeledImage*> p;
  for (const auto& im : images) p.push_back(&im);
  return p;
}

struct CommResult {
  double top1 = 0, top5 = 0;       // listener picks the image for each message
  double top1_image_to_message = 0, top5_image_to_message = 0;
  double half_width = 0;           // 95% binomial half-width of top1
  std::size_t batch = 0, trials = 0;
};

// Random batches of distinct images; one message per image.
template <class T>
CommResult comm_success(const Encoded<T>& enc, std::size_t batch, std::size_t trials, std::uint64_t seed,
                        double tau = 0.1) {
  const std::size_t n = enc.text.size();
  if (n < 2) throw std::invalid_argument("comm_success: need at least two images");
  batch = std::min(batch, n);
  const std::size_t d = enc.text[0].size();
  Rng rng(derive_seed(seed, "comm"));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  CommResult r;
  r.batch = batch;
  r.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    for (std::size_t i = 0; i < batch; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
    std::vector<T> sim(batch * batch);
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t j = 0; j < batch; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += enc.text[idx[i]][c] * enc.image[idx[j]][c];
        sim[i * batch + j] = static_cast<T>(s / tau);
      }
    auto m = Tensor<T>::from({batch, batch}, std::move(sim));
    r.top1 += topk_accuracy(m, 1);
    r.top5 += topk_accuracy(m, 5);
    r.top1_image_to_message += topk_accuracy(m, 1, true);
    r.top5_image_to_message += topk_accuracy(m, 5, true);
  }
  const double k = static_cast<double>(std::max<std::size_t>(trials, 1));
  r.top1 /= k;
  r.top5 /= k;
  r.top1_image_to_message /= k;
  r.top5_image_to_message /= k;
  r.half_width = 1.96 * std::sqrt(r.top1 * (1 - r.top1) / (k * batch));
  return r;
}

template <class T>
CommResult comm_success(const Agents<T>& agents, const std::vector<LabeledImage>& images, std::size_t batch,
                        std::size_t trials, double tau_s, std::uint64_t seed, double tau = 0.1) {
  auto ptrs = pointers(images);
  return comm_success(encode_images(agents, std::span<const LabeledImage* const>(ptrs), tau_s, seed), batch, trials, seed, tau);
}

// ---------------------------------------------------------------------------
// Classification probes.

struct ClassifyResult {
  double top1 = 0, top5 = 0;
  std::size_t count = 0;
};

namespace detail {

// Classes ordered by descending score, lower id first on ties.
inline std::vector<std::size_t> class_order(const std::vector<double>& score) {
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return order;
}

inline void tally(ClassifyResult& r, const std::vector<double>& score, std::size_t truth) {
  const auto order = class_order(score);
  r.top1 += order[0] == truth;
  for (std::size_t i = 0; i < std::min<std::size_t>(5, order.size()); ++i)
    if (order[i] == truth) r.top5 += 1;
  ++r.count;
}

inline void finish(ClassifyResult& r) {
  if (r.count == 0) return;
  r.top1 /= static_cast<double>(r.count);
  r.top5 /= static_cast<double>(r.count);
}

}  // namespace detail

struct FeatureTable {
  std::vector<std::vector<double>> features;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> ids;

  std::size_t size() const { return features.size(); }
  std::size_t dim() const { return features.empty() ? 0 : features[0].size(); }

  void add(std::vector<double> f, std::size_t label, std::size_t id) {
    if (!features.empty() && f.size() != dim())
      throw std::invalid_argument("FeatureTable: feature dimension " + std::to_string(f.size()) + " differs from " +
                                  std::to_string(dim()));
    features.push_back(std::move(f));
    labels.push_back(label);
    ids.push_back(id);
  }

  std::size_t num_classes() const { return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1; }
};

template <class T>
FeatureTable feature_table(const Encoded<T>& enc, std::span<const LabeledImage* const> images) {
  if (enc.features.size() != images.size()) throw std::invalid_argument("feature_table: size mismatch");
  FeatureTable t;
  for (std::size_t i = 0; i < images.size(); ++i)
    t.add(std::vector<double>(enc.features[i].begin(), enc.features[i].end()), images[i]->label, images[i]->id);
  return t;
}

// Class scores of one query: the k most cosine-similar training rows vote
// with weight exp(sim / temperature). Lower row index wins similarity ties.
inline std::vector<double> knn_scores(const FeatureTable& train, std::span<const double> query, std::size_t k,
                                      std::size_t num_classes, double temperature = 0.07) {
  auto norm = [](std::span<const double> v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  const double qn = norm(query);
  std::vector<std::pair<double, std::size_t>> sims(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& f = train.features[i];
    double dot = 0;
    for (std::size_t c = 0; c < f.size(); ++c) dot += f[c] * query[c];
    const double den = qn * norm(f);
    sims[i] = {den > 0 ? dot / den : 0.0, i};
  }
  std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(), [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  std::vector<double> score(num_classes, 0.0);
  for (std::size_t j = 0; j < k; ++j) score[train.labels[sims[j].second]] += std::exp(sims[j].first / temperature);
  return score;
}

inline ClassifyResult knn_eval(const FeatureTable& train, const FeatureTable& test, std::size_t k = 20,
                               double temperature = 0.07) {
  if (k == 0 || k > train.size()) throw std::invalid_argument("knn_eval: k must be in [1, train size]");
  if (test.size() && test.dim() != train.dim())
    throw std::invalid_argument("knn_eval: feature dimension mismatch (" + std::to_string(train.dim()) + " vs " +
                                std::to_string(test.dim()) + ")");
  const std::size_t classes = std::max(train.num_classes(), test.num_classes());
  ClassifyResult r;
  for (std::size_t i = 0; i < test.size(); ++i)
    detail::tally(r, knn_scores(train, test.features[i], k, classes, temperature), test.labels[i]);
  detail::finish(r);
  return r;
}

// ---------------------------------------------------------------------------
// Bag of symbols.

struct BowDocument {
  std::vector<std::size_t> counts;  // length V

  std::size_t length() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
};

inline BowDocument bow_document(const std::vector<Token>& msg, std::size_t vocab) {
  BowDocument d{std::vector<std::size_t>(vocab, 0)};
  for (const auto& t : msg) {
    if (t.symbol >= vocab) throw std::out_of_range("bow_document: symbol outside vocabulary");
    ++d.counts[t.symbol];
  }
  return d;
}

// tf = count / length, idf = log(N / (1 + df)) + 1.
class TfIdf {
 public:
  TfIdf() = default;
  explicit TfIdf(const std::vector<BowDocument>& docs) {
    if (docs.empty()) throw std::invalid_argument("TfIdf: no documents");
    const std::size_t v = docs[0].counts.size();
    std::vector<std::size_t> df(v, 0);
    for (const auto& d : docs) {
      if (d.counts.size() != v) throw std::invalid_argument("TfIdf: inconsistent vocabulary size");
      for (std::size_t j = 0; j < v; ++j) df[j] += d.counts[j] > 0;
    }
    idf_.resize(v);
    const auto n = static_cast<double>(docs.size());
    for (std::size_t j = 0; j < v; ++j) idf_[j] = std::log(n / (1.0 + static_cast<double>(df[j]))) + 1.0;
  }

  const std::vector<double>& idf() const { return idf_; }

  std::vector<double> operator()(const BowDocument& d) const {
    if (d.counts.size() != idf_.size()) throw std::invalid_argument("TfIdf: vocabulary size mismatch");
    std::vector<double> x(idf_.size(), 0.0);
    const auto len = static_cast<double>(d.length());
    if (len == 0) return x;
    for (std::size_t j = 0; j < x.size(); ++j)
      if (d.counts[j]) x[j] = static_cast<double>(d.counts[j]) / len * idf_[j];
    return x;
  }

 private:
  std::vector<double> idf_;
};

// Complement naive Bayes with additive smoothing. Scores are
// log prior(c) - sum_v x_v log theta(~c, v); an empty document scores by prior.
class ComplementNB {
 public:
  ComplementNB(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& y, std::size_t num_classes,
               double alpha = 1.0) {
    if (x.empty() || x.size() != y.size()) throw std::invalid_argument("ComplementNB: bad training data");
    const std::size_t v = x[0].size();
    std::vector<double> total(v, 0.0);
    std::vector<std::vector<double>> per(num_classes, std::vector<double>(v, 0.0));
    std::vector<double> n(num_classes, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (y[i] >= num_classes) throw std::invalid_argument("ComplementNB: label out of range");
      n[y[i]] += 1;
      for (std::size_t j = 0; j < v; ++j) {
        per[y[i]][j] += x[i][j];
        total[j] += x[i][j];
      }
    }
    log_theta_.assign(num_classes, std::vector<double>(v));
    log_prior_.resize(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
      double denom = 0;
      for (std::size_t j = 0; j < v; ++j) denom += total[j] - per[c][j] + alpha;
      for (std::size_t j = 0; j < v; ++j) log_theta_[c][j] = std::log((total[j] - per[c][j] + alpha) / denom);
      log_prior_[c] = n[c] > 0 ? std::log(n[c] / static_cast<double>(x.size())) : -std::numeric_limits<double>::infinity();
    }
  }

  std::vector<double> scores(std::span<const double> x) const {
    std::vector<double> s(log_prior_);
    for (std::size_t c = 0; c < s.size(); ++c)
      for (std::size_t j = 0; j < x.size(); ++j) s[c] -= x[j] * log_theta_[c][j];
    return s;
  }

  std::size_t predict(std::span<const double> x) const { return detail::class_order(scores(x))[0]; }

 private:
  std::vector<std::vector<double>> log_theta_;
  std::vector<double> log_prior_;
};

inline ClassifyResult bow_classify(const std::vector<BowDocument>& train, const std::vector<std::size_t>& train_labels,
                                   const std::vector<BowDocument>& test, const std::vector<std::size_t>& test_labels) {
  if (train.size() != train_labels.size() || test.size() != test_labels.size())
    throw std::invalid_argument("bow_classify: documents and labels differ in length");
  TfIdf tfidf(train);
  std::vector<std::vector<double>> x;
  for (const auto& d : train) x.push_back(tfidf(d));
  std::size_t classes = 0;
  for (auto l : train_labels) classes = std::max(classes, l + 1);
  for (auto l : test_labels) classes = std::max(classes, l + 1);
  ComplementNB nb(x, train_labels, classes);
  ClassifyResult r;
  for (std::size_t i = 0; i < test.size(); ++i) detail::tally(r, nb.scores(tfidf(test[i])), test_labels[i]);
  detail::finish(r);
  return r;
}

// ---------------------------------------------------------------------------
// Topographic similarity.

inline double jaccard(const std::set<std::size_t>& a, const std::set<std::size_t>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t inter = 0;
  for (auto x : a) inter += b.count(x);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

inline std::set<std::size_t> symbol_set(const std::vector<Token>& msg) {
  std::set<std::size_t> s;
  for (const auto& t : msg) s.insert(t.symbol);
  return s;
}

// NaN when either side has zero variance.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("pearson: need two equal series of length >= 2");
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n, my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

inline constexpr double kDistanceBlurSigma = 1.0;
inline constexpr std::size_t kDistanceDownsample = 4;

// Luminance, Gaussian blur, then average pooling by kDistanceDownsample.
inline std::vector<float> perceptual_proxy(std::span<const float> img, ImageDims d) {
  if (img.size() != d.size()) throw std::invalid_argument("perceptual_proxy: image size mismatch");
  const std::size_t hw = d.height * d.width;
  std::vector<float> lum(hw);
  for (std::size_t i = 0; i < hw; ++i)
    lum[i] = d.channels == 3 ? 0.299f * img[i] + 0.587f * img[hw + i] + 0.114f * img[2 * hw + i] : img[i];
  gaussian_blur(lum, ImageDims{1, d.height, d.width}, kDistanceBlurSigma);
  const std::size_t f = kDistanceDownsample, h = d.height / f, w = d.width / f;
  std::vector<float> out(h * w, 0.0f);
  for (std::size_t y = 0; y < h * f; ++y)
    for (std::size_t x = 0; x < w * f; ++x) out[(y / f) * w + x / f] += lum[y * d.width + x] / static_cast<float>(f * f);
  return out;
}

inline double image_distance(std::span<const float> a, std::span<const float> b, ImageDims d) {
  const auto pa = perceptual_proxy(a, d), pb = perceptual_proxy(b, d);
  double s = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) s += (pa[i] - pb[i]) * (pa[i] - pb[i]);
  return s / static_cast<double>(pa.size());
}

struct TopoRecord {
  std::size_t label = 0;
  std::vector<std::pair<double, double>> pairs;  // (Jaccard, image distance)
  double correlation = 0;                        // Pearson of Jaccard vs -distance
};

struct TopoResult {
  std::vector<TopoRecord> records;
  double mean = 0, median = 0;  // over classes with a defined correlation
  std::size_t skipped = 0;      // classes with fewer than per_class_n images
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

template <class T>
TopoResult topographic_similarity(const Agents<T>& agents, const std::vector<LabeledImage>& images,
                                  std::size_t per_class_n, double tau_s, std::uint64_t seed,
                                  std::ostream* warn = &std::cerr) {
  if (per_class_n < 2) throw std::invalid_argument("topographic_similarity: per_class_n must be >= 2");
  std::size_t classes = 0;
  for (const auto& im : images) classes = std::max(classes, im.label + 1);
  std::vector<std::vector<const LabeledImage*>> by_class(classes);
  for (const auto& im : images) by_class[im.label].push_back(&im);
  const auto& g = agents.config().grid;
  const ImageDims dims{g.channels, g.height, g.width};
  Rng rng(derive_seed(seed, "topo"));
  TopoResult res;
  std::vector<double> corrs;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& pool = by_class[c];
    if (pool.size() < per_class_n) {
      ++res.skipped;
      if (warn && !pool.empty())
        *warn << "warning: class " << c << " has " << pool.size() << " images, fewer than " << per_class_n << "; skipped\n";
      continue;
    }
    for (std::size_t i = 0; i < per_class_n; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    std::span<const LabeledImage* const> pick(pool.data(), per_class_n);
    auto enc = encode_images(agents, pick, tau_s, derive_seed(seed, "topo", c));
    TopoRecord rec;
    rec.label = c;
    std::vector<double> js, neg;
    for (std::size_t i = 0; i < per_class_n; ++i)
      for (std::size_t j = i + 1; j < per_class_n; ++j) {
        const double s = jaccard(symbol_set(enc.messages[i]), symbol_set(enc.messages[j]));
        const double d = image_distance(pick[i]->view(), pick[j]->view(), dims);
        rec.pairs.emplace_back(s, d);
        js.push_back(s);
        neg.push_back(-d);
      }
    rec.correlation = pearson(js, neg);
    if (std::isfinite(rec.correlation)) corrs.push_back(rec.correlation);
    res.records.push_back(std::move(rec));
  }
  res.mean = corrs.empty() ? std::numeric_limits<double>::quiet_NaN()
                           : std::accumulate(corrs.begin(), corrs.end(), 0.0) / static_cast<double>(corrs.size());
  res.median = median_of(corrs);
  return res;
}

// ---------------------------------------------------------------------------
// Message statistics.

struct MessageStats {
  std::vector<std::size_t> unique_hist;  // index: distinct symbols in a message
  std::vector<std::size_t> total_hist;   // index: kept tokens in a message
  double mean_unique = 0, median_unique = 0, mean_total = 0, median_total = 0;
  std::size_t messages = 0;

  std::string csv() const {
    std::string out = "count,unique_messages,total_messages\n";
    for (std::size_t i = 0; i < total_hist.size(); ++i)
      out += std::to_string(i) + "," + std::to_string(i < unique_hist.size() ? unique_hist[i] : 0) + "," +
             std::to_string(total_hist[i]) + "\n";
    return out;
  }
};

inline MessageStats message_stats(const std::vector<std::vector<Token>>& msgs, std::size_t message_length) {
  MessageStats st;
  st.unique_hist.assign(message_length + 1, 0);
  st.total_hist.assign(message_length + 1, 0);
  std::vector<double> uniq, total;
  for (const auto& m : msgs) {
    if (m.size() > message_length) throw std::invalid_argument("message_stats: message longer than L");
    const auto u = symbol_set(m).size();
    ++st.unique_hist[u];
    ++st.total_hist[m.size()];
    uniq.push_back(static_cast<double>(u));
    total.push_back(static_cast<double>(m.size()));
  }
  st.messages = msgs.size();
  if (!msgs.empty()) {
    st.mean_unique = std::accumulate(uniq.begin(), uniq.end(), 0.0) / static_cast<double>(uniq.size());
    st.mean_total = std::accumulate(total.begin(), total.end(), 0.0) / static_cast<double>(total.size());
    st.median_unique = median_of(uniq);
    st.median_total = median_of(total);
  }
  return st;
}

struct SymbolFrequency {
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  double utilization = 0;  // fraction of symbols with a nonzero count

  std::string csv() const {
    std::string out = "symbol,count\n";
    for (std::size_t i = 0; i < counts.size(); ++i) out += std::to_string(i) + "," + std::to_string(counts[i]) + "\n";
    return out;
  }
};

inline SymbolFrequency symbol_frequency(const std::vector<std::vector<Token>>& msgs, std::size_t vocab) {
  SymbolFrequency f;
  f.counts.assign(vocab, 0);
  for (const auto& m : msgs)
    for (const auto& t : m) {
      if (t.symbol >= vocab) throw std::out_of_range("symbol_frequency: symbol outside vocabulary");
      ++f.counts[t.symbol];
      ++f.total;
    }
  std::size_t used = 0;
  for (auto c : f.counts) used += c > 0;
  f.utilization = vocab ? static_cast<double>(used) / static_cast<double>(vocab) : 0.0;
  return f;
}

// ---------------------------------------------------------------------------
// Patch-drop curves with a small supervised patch classifier.

struct PatchClassifierConfig {
  std::size_t hidden = 64;
  int epochs = 10;
  std::size_t batch_size = 32;
  double lr = 0.02, momentum = 0.9;
  std::uint64_t seed = 0;
};

// Per-patch MLP, mean over the visible patches, linear head.
template <class T>
class PatchClassifier {
 public:
  PatchClassifier(const PatchGridSpec& grid, std::size_t classes, const PatchClassifierConfig& cfg)
      : grid_(grid), classes_(classes) {
    grid_.validate();
    const auto seed = derive_seed(cfg.seed, "classifier");
    fc1_ = Linear<T>(ps_, "probe.fc1", grid_.patch_dim(), cfg.hidden, seed);
    fc2_ = Linear<T>(ps_, "probe.fc2", cfg.hidden, cfg.hidden, seed);
    head_ = Linear<T>(ps_, "probe.head", cfg.hidden, classes, seed, Init::xavier);
  }

  const PatchGridSpec& grid() const { return grid_; }
  std::size_t classes() const { return classes_; }
  ParamSet<T>& params() { return ps_; }

  // patches [B*K, D]; visible has B*K entries. A row with no visible patch
  // pools to zero, so its logits are the head bias.
  Tensor<T> logits(const Tensor<T>& patches, const std::vector<std::uint8_t>& visible) const {
    const std::size_t k = grid_.num_patches(), b = patches.dim(0) / k;
    if (visible.size() != b * k) throw std::invalid_argument("PatchClassifier: visibility mask size mismatch");
    auto h = relu(fc2_(relu(fc1_(scale(add_scalar(patches, T(-0.5)), T(4))))));
    std::vector<T> w(b * k);
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t n = 0;
      for (std::size_t j = 0; j < k; ++j) n += visible[i * k + j] != 0;
      for (std::size_t j = 0; j < k; ++j) w[i * k + j] = visible[i * k + j] && n ? T(1) / static_cast<T>(n) : T(0);
    }
    auto pooled = sum(mul(reshape(h, {b, k, h.dim(1)}), Tensor<T>::from({b, k, 1}, std::move(w))), 1);
    return head_(pooled);
  }

  std::vector<std::size_t> predict(const Tensor<T>& patches, const std::vector<std::uint8_t>& visible) const {
    NoGradGuard ng;
    auto z = logits(patches, visible);
    std::vector<std::size_t> out(z.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::vector<double> row(classes_);
      for (std::size_t c = 0; c < classes_; ++c) row[c] = z.at(i * classes_ + c);
      out[i] = detail::class_order(row)[0];
    }
    return out;
  }

 private:
  PatchGridSpec grid_;
  std::size_t classes_;
  ParamSet<T> ps_;
  Linear<T> fc1_, fc2_, head_;
};

namespace detail {
template <class T>
Tensor<T> patch_rows(std::span<const LabeledImage* const> images, const PatchGridSpec& g) {
  std::vector<T> v;
  v.reserve(images.size() * g.image_size());
  for (const auto* im : images)
    for (auto& p : patchify_chw(im->view(), g)) v.insert(v.end(), p.begin(), p.end());
  return Tensor<T>::from({images.size() * g.num_patches(), g.patch_dim()}, std::move(v));
}

// k distinct positions out of n, uniformly.
inline std::vector<std::uint8_t> random_subset(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<std::uint8_t> keep(n, 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[i + rng.below(n - i)]);
    keep[idx[i]] = 1;
  }
  return keep;
}
}  // namespace detail

// Cross-entropy training; every sample shows a uniformly random number
// (1..K) of random patches so the classifier copes with partial inputs.
template <class T>
PatchClassifier<T> train_patch_classifier(const std::vector<LabeledImage>& images, const PatchGridSpec& grid,
                                          std::size_t classes, const PatchClassifierConfig& cfg = {}) {
  PatchClassifier<T> clf(grid, classes, cfg);
  SgdMomentum<T> opt(clf.params().tensors(), cfg.momentum);
  auto order = pointers(images);
  const std::size_t k = grid.num_patches(), b = std::min(cfg.batch_size, images.size());
  for (int e = 0; e < cfg.epochs; ++e) {
    Rng rng(derive_seed(cfg.seed, "classifier-epoch", e));
    rng.shuffle(order);
    const double lr = cosine_lr(e, cfg.epochs, cfg.lr, 0);
    for (std::size_t s = 0; s + b <= order.size(); s += b) {
      std::span<const LabeledImage* const> batch(order.data() + s, b);
      std::vector<std::uint8_t> vis;
      std::vector<T> onehot(b * classes, T(0));
      for (std::size_t i = 0; i < b; ++i) {
        auto keep = detail::random_subset(k, 1 + rng.below(k), rng);
        vis.insert(vis.end(), keep.begin(), keep.end());
        onehot[i * classes + batch[i]->label] = T(1);
      }
      auto logp = log_softmax(clf.logits(detail::patch_rows<T>(batch, grid), vis));
      auto loss = scale(sum_all(mul(logp, Tensor<T>::from({b, classes}, std::move(onehot)))), T(-1) / static_cast<T>(b));
      opt.zero_grad();
      backward(loss);
      opt.step(lr);
    }
  }
  return clf;
}

struct DropCurve {
  std::vector<std::size_t> ks;
  std::vector<double> ranked, random;
};

// Accuracy using only k patches: the k highest PatchRank scores (hard_rank,
// deterministic) or k uniformly random patches.
template <class T>
DropCurve patch_drop_curve(const PatchClassifier<T>& clf, const Agents<T>& agents, const std::vector<LabeledImage>& images,
                           const std::vector<std::size_t>& ks, std::uint64_t seed, std::size_t chunk = 64) {
  const auto& g = clf.grid();
  const std::size_t k_all = g.num_patches();
  if (agents.config().grid.num_patches() != k_all) throw std::invalid_argument("patch_drop_curve: grid mismatch");
  for (auto k : ks)
    if (k > k_all) throw std::invalid_argument("patch_drop_curve: k = " + std::to_string(k) + " exceeds K = " + std::to_string(k_all));
  DropCurve dc{ks, std::vector<double>(ks.size(), 0.0), std::vector<double>(ks.size(), 0.0)};
  if (images.empty()) return dc;
  auto ptrs = pointers(images);
  for (std::size_t begin = 0; begin < ptrs.size(); begin += chunk) {
    const std::size_t end = std::min(ptrs.size(), begin + chunk), n = end - begin;
    std::span<const LabeledImage* const> part(ptrs.data() + begin, n);
    std::vector<std::span<const float>> views;
    for (const auto* im : part) views.push_back(im->view());
    std::vector<std::vector<int>> ranks(n);
    {
      NoGradGuard ng;
      auto s = agents.importance(nhwc_batch<T>(views, g));
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row(k_all);
        for (std::size_t j = 0; j < k_all; ++j) row[j] = s.at(i * k_all + j);
        ranks[i] = hard_rank(row);
      }
    }
    auto rows = detail::patch_rows<T>(part, g);
    for (std::size_t q = 0; q < ks.size(); ++q) {
      const std::size_t k = ks[q];
      std::vector<std::uint8_t> top(n * k_all), rnd;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k_all; ++j) top[i * k_all + j] = ranks[i][j] > static_cast<int>(k_all - k);
        Rng rng(derive_seed(seed, "drop", k, part[i]->id));
        auto keep = detail::random_subset(k_all, k, rng);
        rnd.insert(rnd.end(), keep.begin(), keep.end());
      }
      auto pt = clf.predict(rows, top), pr = clf.predict(rows, rnd);
      for (std::size_t i = 0; i < n; ++i) {
        dc.ranked[q] += pt[i] == part[i]->label;
        dc.random[q] += pr[i] == part[i]->label;
      }
    }
  }
  for (std::size_t q = 0; q < ks.size(); ++q) {
    dc.ranked[q] /= static_cast<double>(images.size());
    dc.random[q] /= static_cast<double>(images.size());
  }
  return dc;
}

// p-value of H1: mean(a - b) > 0, paired Student t. Zero spread gives 0 or 1
// depending on the sign of the mean difference (0.5 when it is zero).
inline double paired_t_pvalue(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("paired_t_pvalue: need >= 2 paired samples");
  const auto n = static_cast<double>(a.size());
  double mean = 0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += (a[i] - b[i]) / n;
  double var = 0;
  for (std::size_t i = 0; i < a.size(); ++i) var += (a[i] - b[i] - mean) * (a[i] - b[i] - mean) / (n - 1);
  if (var <= 0) return mean > 0 ? 0.0 : mean < 0 ? 1.0 : 0.5;
  const double t = mean / std::sqrt(var / n);
  return boost::math::cdf(boost::math::complement(boost::math::students_t(n - 1), t));
}

// ---------------------------------------------------------------------------
// Visualisations.

// Blue (low) to red (high) through green.
inline std::array<float, 3> heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return {static_cast<float>(t), static_cast<float>(1 - std::abs(2 * t - 1)), static_cast<float>(1 - t)};
}

inline constexpr float kHeatmapAlpha = 0.5f;

inline RgbImage heatmap_overlay(std::span<const float> image, const PatchGridSpec& g, std::span<const double> scores) {
  g.validate();
  if (g.channels != 3 && g.channels != 1) throw std::invalid_argument("heatmap: need 1 or 3 channels");
  if (image.size() != g.image_size()) throw std::invalid_argument("heatmap: image size mismatch");
  if (scores.size() != g.num_patches())
    throw std::invalid_argument("heatmap: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(g.num_patches()) + " patches");
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  auto out = make_image(g.height, g.width);
  const std::size_t hw = g.height * g.width;
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) {
      const double s = scores[(y / g.patch) * g.grid_w() + x / g.patch];
      const auto col = heat_color(*hi > *lo ? (s - *lo) / (*hi - *lo) : 0.5);
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = image[(g.channels == 3 ? c : 0) * hw + y * g.width + x];
        out.at(c, y, x) = (1 - kHeatmapAlpha) * v + kHeatmapAlpha * col[c];
      }
    }
  return out;
}

inline void heatmap_render(std::span<const float> image, const PatchGridSpec& g, std::span<const double> scores,
                           const std::string& path) {
  write_ppm(path, heatmap_overlay(image, g, scores));
}

struct SymbolGallery {
  std::size_t symbol = 0;
  std::vector<std::vector<float>> patches;  // CHW patch pixels
  std::vector<std::size_t> sources;         // sample id per patch
  std::vector<std::size_t> positions;       // patch index per patch
  bool empty() const { return patches.empty(); }
};

// Patches whose deterministic symbol equals `symbol`: first one per image in
// corpus order, then further patches from the same images if n is not reached.
template <class T>
SymbolGallery symbol_gallery(const Agents<T>& agents, const std::vector<LabeledImage>& images, std::size_t symbol,
                             std::size_t n = 6) {
  const auto& g = agents.config().grid;
  const std::size_t k = g.num_patches(), l = agents.config().symbols_per_patch;
  if (symbol >= agents.config().vocab) throw std::out_of_range("symbol_gallery: symbol outside vocabulary");
  SymbolGallery gal;
  gal.symbol = symbol;
  std::vector<std::pair<std::size_t, std::size_t>> extra;  // (image, patch)
  for (std::size_t i = 0; i < images.size() && gal.patches.size() < n; ++i) {
    auto patches = patchify_chw(images[i].view(), g);
    std::vector<float> flat;
    for (auto& p : patches) flat.insert(flat.end(), p.begin(), p.end());
    auto ids = agents.symbol_argmax(Tensor<T>::from({k, g.patch_dim()}, std::vector<T>(flat.begin(), flat.end())));
    bool taken = false;
    for (std::size_t p = 0; p < k; ++p) {
      bool hit = false;
      for (std::size_t j = 0; j < l; ++j) hit |= ids[p * l + j] == symbol;
      if (!hit) continue;
      if (!taken) {
        gal.patches.push_back(patches[p]);
        gal.sources.push_back(images[i].id);
        gal.positions.push_back(p);
        taken = true;
      } else if (extra.size() < n) {
        extra.emplace_back(i, p);
      }
    }
  }
  for (std::size_t e = 0; e < extra.size() && gal.patches.size() < n; ++e) {
    const auto [i, p] = extra[e];
    gal.patches.push_back(patchify_chw(images[i].view(), g)[p]);
    gal.sources.push_back(images[i].id);
    gal.positions.push_back(p);
  }
  return gal;
}

// Patches side by side, upscaled by `zoom`, separated by a white gap.
inline RgbImage gallery_image(const SymbolGallery& gal, const PatchGridSpec& g, std::size_t zoom = 4, std::size_t gap = 2) {
  const std::size_t s = g.patch * zoom, n = std::max<std::size_t>(gal.patches.size(), 1);
  auto out = make_image(s, n * s + (n - 1) * gap, 1.0f);
  for (std::size_t i = 0; i < gal.patches.size(); ++i)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          const std::size_t src = g.channels == 3 ? c : 0;
          out.at(c, y, i * (s + gap) + x) = gal.patches[i][(src * g.patch + y / zoom) * g.patch + x / zoom];
        }
  return out;
}

// ---------------------------------------------------------------------------
// Output helpers.

using Summary = std::vector<std::pair<std::string, std::string>>;

inline std::string summary_text(const Summary& s) {
  std::string out;
  for (const auto& [k, v] : s) out += k + " = " + v + "\n";
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.close();
  if (!out) throw std::runtime_error("cannot write " + path);
}

}  // namespace patchgame
