#pragma once

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "weakseg/aggregation.hpp"
#include "weakseg/divergence.hpp"
#include "weakseg/io.hpp"
#include "weakseg/model.hpp"
#include "weakseg/sampler.hpp"
#include "weakseg/synthwsi.hpp"
#include "weakseg/tensor.hpp"

namespace weakseg {

struct PipelineConfig {
  double alpha = 2.0;
  double eta = 50.0;
  double beta0 = 0.0;
  double beta1 = 1.0;
  int patch_size = 24;
  int batch_size = 8;
  int buffer_capacity = 256;
  double buffer_min_fill = 0.25;
  int staleness_bound_epochs = 4;  // N
  int map_chunk = 64;
  long total_steps = 1000;
  int weight_exchange_period = 50;
  int interleave_train_per_map = 4;  // deterministic-mode schedule
  double learning_rate = 0.05;
  double momentum = 0.0;
  bool augment_patches = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(alpha >= 0.0)) throw std::invalid_argument("PipelineConfig: alpha must be >= 0");
    if (!(eta > 0.0 && eta <= 100.0)) throw std::invalid_argument("PipelineConfig: eta must be in (0,100]");
    BetaParams{beta0, beta1}.validate();
    if (patch_size < 1 || batch_size < 1 || buffer_capacity < 1 || total_steps < 1 ||
        weight_exchange_period < 1 || interleave_train_per_map < 1 || map_chunk < 1 ||
        staleness_bound_epochs < 1)
      throw std::invalid_argument("PipelineConfig: non-positive field");
    if (!(buffer_min_fill >= 0.0 && buffer_min_fill <= 1.0))
      throw std::invalid_argument("PipelineConfig: buffer_min_fill must be in [0,1]");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("PipelineConfig: learning_rate must be > 0");
  }

  BetaParams beta() const { return {beta0, beta1}; }
};

// Probability of the model output being clamped away from {0,1} before the
// loss; keeps the divergence and its gradient finite at softmax saturation.
inline constexpr double kProbClamp = 1e-7;

// ---- Slide-level loss head ----

template <typename T>
struct SlideLossResult {
  double loss = 0.0;
  T q1 = T(0);
  SlideLogits<T> agg;
  LogitMap<T> dlogits;
};

// L_beta(one-hot(label) || softmax(l0, l1)) through top-eta aggregation,
// with the exact chain back to per-pixel logits. upstream_scale multiplies
// the returned gradient (set to 1/batch for mean-reduced batches).
template <typename T>
SlideLossResult<T> slide_level_loss(const LogitMap<T>& logits, SlideLabel label, double eta,
                                    const BetaParams& beta, double upstream_scale = 1.0) {
  SlideLossResult<T> res;
  res.agg = aggregate(logits, eta);
  const T q1 = slide_class_probs(res.agg).second;
  res.q1 = q1;
  const double q1c = std::min(1.0 - kProbClamp, std::max(kProbClamp, static_cast<double>(q1)));
  const double q0c = 1.0 - q1c;
  const double p1 = label == SlideLabel::Malign ? 1.0 : 0.0;
  const double p0 = 1.0 - p1;
  res.loss = beta_divergence2(p0, p1, q0c, q1c, beta);
  const auto [g0, g1] = beta_divergence2_grad_q(p0, p1, q0c, q1c, beta);
  // softmax jacobian: dq1/dl1 = q1 q0 = -dq0/dl1, clamp treated as identity
  const double sig = static_cast<double>(q1) * static_cast<double>(T(1) - q1);
  const double dl1 = (g1 - g0) * sig * upstream_scale;
  res.dlogits =
      aggregate_backward(static_cast<T>(-dl1), static_cast<T>(dl1), res.agg, logits.height, logits.width);
  return res;
}

// ---- Versioned probability-map store ----

struct MapEntry {
  ProbMap map;
  std::uint64_t weights_version = 0;  // training step of the producing snapshot
  long epoch = 0;                     // mapping epoch at publication
  std::uint64_t digest = 0;           // fnv1a over the map bytes
};

// Latest map per slide. Entries are immutable once published and swapped
// under a lock, so readers see either the previous map or the new one.
class MapStore {
 public:
  void publish(int slide_id, MapEntry entry) {
    auto e = std::make_shared<const MapEntry>(std::move(entry));
    std::lock_guard lock(mu_);
    latest_[slide_id] = std::move(e);
    ++publications_[slide_id];
  }

  std::shared_ptr<const MapEntry> fetch(int slide_id) const {
    std::lock_guard lock(mu_);
    const auto it = latest_.find(slide_id);
    return it == latest_.end() ? nullptr : it->second;
  }

  long publication_count(int slide_id) const {
    std::lock_guard lock(mu_);
    const auto it = publications_.find(slide_id);
    return it == publications_.end() ? 0 : it->second;
  }

  std::size_t mapped_slides() const {
    std::lock_guard lock(mu_);
    return latest_.size();
  }

 private:
  mutable std::mutex mu_;
  std::unordered_map<int, std::shared_ptr<const MapEntry>> latest_;
  std::unordered_map<int, long> publications_;
};

// Latest-value weight snapshot handoff, training worker -> mapping worker.
template <typename T>
class SnapshotSlot {
 public:
  void publish(SegNet<T> net, std::uint64_t version) {
    auto s = std::make_shared<const SegNet<T>>(std::move(net));
    std::lock_guard lock(mu_);
    net_ = std::move(s);
    version_ = version;
  }

  std::pair<std::shared_ptr<const SegNet<T>>, std::uint64_t> fetch() const {
    std::lock_guard lock(mu_);
    return {net_, version_};
  }

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const SegNet<T>> net_;
  std::uint64_t version_ = 0;
};

// ---- Run log ----

struct RunLogRow {
  long step = 0;
  double loss = 0.0;
  int slide_id = -1;
  double gamma_estimate = std::numeric_limits<double>::quiet_NaN();  // NaN: no malign patch in batch
  double buffer_fill = 0.0;
  long staleness = 0;  // steps between the used map's weights version and now
};

struct MappingEvent {
  long publish_step = 0;
  int slide_id = -1;
  std::uint64_t weights_version = 0;
  long staleness_at_publish = 0;
  long epoch = 0;
};

class RunLog {
 public:
  void add_row(RunLogRow row) {
    std::lock_guard lock(mu_);
    rows_.push_back(row);
  }
  void add_mapping_event(MappingEvent ev) {
    std::lock_guard lock(mu_);
    mapping_events_.push_back(ev);
  }
  void count_torn_read() { torn_reads_.fetch_add(1, std::memory_order_relaxed); }

  const std::vector<RunLogRow>& rows() const { return rows_; }
  const std::vector<MappingEvent>& mapping_events() const { return mapping_events_; }
  long torn_reads() const { return torn_reads_.load(); }

  long max_publish_staleness() const {
    long m = 0;
    for (const auto& e : mapping_events_) m = std::max(m, e.staleness_at_publish);
    return m;
  }

  // epoch -> slide -> mapping visits
  std::map<long, std::map<int, long>> visits_per_epoch() const {
    std::map<long, std::map<int, long>> v;
    for (const auto& e : mapping_events_) ++v[e.epoch][e.slide_id];
    return v;
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "step,loss,slide_id,gamma_estimate,buffer_fill,staleness\n";
    for (const auto& r : rows_)
      f << r.step << "," << r.loss << "," << r.slide_id << ","
        << (std::isnan(r.gamma_estimate) ? std::string("nan") : std::to_string(r.gamma_estimate)) << ","
        << r.buffer_fill << "," << r.staleness << "\n";
  }

  void write_mapping_csv(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "publish_step,slide_id,weights_version,staleness_at_publish,epoch\n";
    for (const auto& e : mapping_events_)
      f << e.publish_step << "," << e.slide_id << "," << e.weights_version << ","
        << e.staleness_at_publish << "," << e.epoch << "\n";
  }

  void write_visits_csv(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "epoch,slide_id,visits\n";
    for (const auto& [epoch, slides] : visits_per_epoch())
      for (const auto& [slide, n] : slides) f << epoch << "," << slide << "," << n << "\n";
  }

 private:
  mutable std::mutex mu_;
  std::vector<RunLogRow> rows_;
  std::vector<MappingEvent> mapping_events_;
  std::atomic<long> torn_reads_{0};
};

// ---- Mapping pass ----

// Probability map of a whole slide, computed in core tiles of `chunk`
// pixels with a halo of one receptive-field radius (rounded up to the pool
// grid). Stitched output is bit-equal to single-shot inference because each
// core pixel sees exactly the same inputs either way.
template <typename T>
ProbMap compute_slide_map(const SegNet<T>& net, const Volume<T>& pixels, int chunk) {
  const int h = pixels.height, w = pixels.width;
  const int pf = net.config().pool_factor();
  if (h % pf || w % pf) throw std::invalid_argument("compute_slide_map: slide size not divisible by 2^depth");
  chunk = std::max(pf, (chunk / pf) * pf);
  const int halo = ((net.receptive_field_radius() + pf - 1) / pf) * pf;
  ProbMap out(h, w);
  for (int ti = 0; ti < h; ti += chunk) {
    const int th = std::min(chunk, h - ti);
    for (int tj = 0; tj < w; tj += chunk) {
      const int tw = std::min(chunk, w - tj);
      const int e_top = std::max(0, ti - halo), e_bot = std::min(h, ti + th + halo);
      const int e_left = std::max(0, tj - halo), e_right = std::min(w, tj + tw + halo);
      Volume<T> tile(pixels.channels, e_bot - e_top, e_right - e_left);
      for (int c = 0; c < pixels.channels; ++c)
        for (int i = e_top; i < e_bot; ++i)
          for (int j = e_left; j < e_right; ++j)
            tile.at(c, i - e_top, j - e_left) = pixels.at(c, i, j);
      const auto logits = net.forward(tile);
      const auto q = pixel_softmax(logits);
      for (int i = ti; i < ti + th; ++i)
        for (int j = tj; j < tj + tw; ++j)
          out.at(i, j) = static_cast<float>(q.at(i - e_top, j - e_left));
    }
  }
  return out;
}

template <typename T>
Volume<T> to_volume(const Volume<float>& in) {
  if constexpr (std::is_same_v<T, float>) return in;
  Volume<T> out(in.channels, in.height, in.width);
  for (std::size_t i = 0; i < in.v.size(); ++i) out.v[i] = static_cast<T>(in.v[i]);
  return out;
}

// Refresh the maps of every slide in the dataset with the given weights.
template <typename T>
void run_mapping_pass(const SegNet<T>& net, const Dataset& ds, int chunk, MapStore& store,
                      std::uint64_t weights_version = 0) {
  for (const auto& s : ds.slides) {
    auto map = compute_slide_map(net, to_volume<T>(s.pixels), chunk);
    MapEntry e;
    e.digest = checksum(map);
    e.map = std::move(map);
    e.weights_version = weights_version;
    store.publish(s.id, std::move(e));
  }
}

// ---- The training engine ----

enum class PipelineMode {
  Concurrent,       // two free-running workers (the production mode)
  Deterministic,    // single thread, fixed action schedule; reference semantics
  LockstepThreads,  // two workers forced through the Deterministic schedule
};

struct TrainResult {
  SegNet<float> net;
  std::shared_ptr<RunLog> log;
};

namespace detail {

struct BufferEntry {
  Patch patch;
  std::uint64_t map_version = 0;  // weights version of the map the center came from
};

class Turnstile {
 public:
  Turnstile(bool enabled, int train_per_map) : enabled_(enabled), k_(train_per_map) {}

  // action 0 of each cycle is a mapping action, the next k_ are training
  void wait_for(bool mapping, std::atomic<bool>& stop) {
    if (!enabled_) return;
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return stop.load() || is_turn(mapping); });
  }
  void advance() {
    if (!enabled_) return;
    {
      std::lock_guard lock(mu_);
      ++seq_;
    }
    cv_.notify_all();
  }
  void release_all() { cv_.notify_all(); }

 private:
  bool is_turn(bool mapping) const { return (seq_ % (k_ + 1) == 0) == mapping; }
  bool enabled_;
  int k_;
  long seq_ = 0;
  std::mutex mu_;
  std::condition_variable cv_;
};

}  // namespace detail

class PipelineRunner {
 public:
  PipelineRunner(const Dataset& ds, const NetworkConfig& ncfg, PipelineConfig cfg)
      : ds_(ds),
        cfg_(std::move(cfg)),
        net_(make_net_config(ncfg, cfg_)),
        map_select_(slide_ids(ds), slide_pixels(ds), cfg_.staleness_bound_epochs),
        train_select_(slide_ids(ds), slide_pixels(ds), cfg_.staleness_bound_epochs),
        buffer_(static_cast<std::size_t>(cfg_.buffer_capacity), cfg_.buffer_min_fill,
                derive_seed(cfg_.seed, 11)),
        map_rng_(derive_seed(cfg_.seed, 12)),
        train_rng_(derive_seed(cfg_.seed, 13)),
        log_(std::make_shared<RunLog>()) {
    cfg_.validate();
    const int pf = net_.config().pool_factor();
    if (ds.spec.height % pf || ds.spec.width % pf)
      throw std::invalid_argument("run_training: slide size not divisible by 2^depth");
    if (cfg_.patch_size % pf)
      throw std::invalid_argument("run_training: patch size not divisible by 2^depth");
    if (cfg_.patch_size > ds.spec.height || cfg_.patch_size > ds.spec.width)
      throw std::invalid_argument("run_training: patch larger than slides");
    bool has_benign = false, has_malign = false;
    for (const auto& s : ds.slides) (s.label == SlideLabel::Malign ? has_malign : has_benign) = true;
    if (!has_benign || !has_malign)
      throw std::invalid_argument("run_training: dataset needs both classes");
    slot_.publish(net_, 0);
  }

  TrainResult run(PipelineMode mode) {
    if (mode == PipelineMode::Deterministic) {
      while (!done()) {
        mapping_action();
        for (int t = 0; t < cfg_.interleave_train_per_map && !done(); ++t) training_action();
      }
    } else {
      detail::Turnstile turnstile(mode == PipelineMode::LockstepThreads,
                                  cfg_.interleave_train_per_map);
      std::exception_ptr map_err, train_err;
      std::thread mapper([&] {
        try {
          while (!stop_.load()) {
            turnstile.wait_for(true, stop_);
            if (stop_.load()) break;
            mapping_action();
            turnstile.advance();
          }
        } catch (...) {
          map_err = std::current_exception();
          stop_.store(true);
          turnstile.release_all();
        }
      });
      std::thread trainer([&] {
        try {
          while (!done()) {
            turnstile.wait_for(false, stop_);
            if (stop_.load()) break;
            training_action();
            turnstile.advance();
            if (mode == PipelineMode::Concurrent && buffer_starved_) std::this_thread::yield();
          }
        } catch (...) {
          train_err = std::current_exception();
        }
        stop_.store(true);
        turnstile.release_all();
      });
      trainer.join();
      turnstile.release_all();
      mapper.join();
      if (train_err) std::rethrow_exception(train_err);
      if (map_err) std::rethrow_exception(map_err);
    }
    return {net_, log_};
  }

  const RunLog& log() const { return *log_; }

 private:
  static NetworkConfig make_net_config(NetworkConfig ncfg, const PipelineConfig& pcfg) {
    if (ncfg.seed == 0) ncfg.seed = derive_seed(pcfg.seed, 10);
    return ncfg;
  }

  static std::vector<std::pair<int, SlideLabel>> slide_ids(const Dataset& ds) {
    if (ds.slides.empty()) throw std::invalid_argument("run_training: empty dataset");
    std::vector<std::pair<int, SlideLabel>> ids;
    for (const auto& s : ds.slides) ids.emplace_back(s.id, s.label);
    return ids;
  }

  static std::size_t slide_pixels(const Dataset& ds) {
    return static_cast<std::size_t>(ds.spec.height) * ds.spec.width;
  }

  bool done() const { return steps_done_.load() >= cfg_.total_steps; }

  void mapping_action() {
    const long epoch = map_visits_ / static_cast<long>(ds_.slides.size());
    const int slide_id = map_select_.next_slide(epoch, map_rng_);
    const auto [snapshot, version] = slot_.fetch();
    const long fetch_step = steps_done_.load();
    auto map = compute_slide_map(*snapshot, to_volume<float>(ds_.by_id(slide_id).pixels), cfg_.map_chunk);
    double sum = 0.0;
    for (const float v : map.v) sum += v;
    MapEntry e;
    e.digest = checksum(map);
    e.map = std::move(map);
    e.weights_version = version;
    e.epoch = epoch;
    const long publish_step = steps_done_.load();
    map_select_.record_map_sum(slide_id, sum);
    train_select_.record_map_sum(slide_id, sum);
    store_.publish(slide_id, std::move(e));
    map_select_.mark_visited(slide_id, epoch);
    ++map_visits_;
    (void)fetch_step;
    log_->add_mapping_event(
        {publish_step, slide_id, version, publish_step - static_cast<long>(version), epoch});
  }

  void training_action() {
    const long epoch = train_visits_ / static_cast<long>(ds_.slides.size());
    const int slide_id = train_select_.next_slide(epoch, train_rng_);
    train_select_.mark_visited(slide_id, epoch);
    ++train_visits_;
    const auto& slide = ds_.by_id(slide_id);

    auto entry = store_.fetch(slide_id);
    std::uint64_t map_version = 0;
    PatchDistribution dist;
    if (entry) {
      if (checksum(entry->map) != entry->digest) log_->count_torn_read();
      dist = patch_distribution(entry->map, cfg_.alpha, slide_id);
      map_version = entry->weights_version;
    } else {
      dist = patch_distribution(ProbMap(ds_.spec.height, ds_.spec.width, 0.5f), cfg_.alpha, slide_id);
    }
    const auto centers = sample_patch_centers(dist, cfg_.batch_size, train_rng_);
    {
      std::lock_guard lock(buffer_mu_);
      for (const auto& c : centers) {
        auto patch = extract_patch(slide, c, cfg_.patch_size);
        if (cfg_.augment_patches) patch = augment(patch, train_rng_);
        buffer_.push(detail::BufferEntry{std::move(patch), map_version});
      }
    }

    std::optional<std::vector<detail::BufferEntry>> batch;
    double fill = 0.0;
    {
      std::lock_guard lock(buffer_mu_);
      batch = buffer_.pop_batch(static_cast<std::size_t>(cfg_.batch_size));
      fill = buffer_.fill();
    }
    buffer_starved_ = !batch.has_value();
    if (!batch) return;

    auto grads = net_.zero_gradients();
    double loss_sum = 0.0;
    long malign_patches = 0, clean_malign = 0;
    std::uint64_t oldest_version = std::numeric_limits<std::uint64_t>::max();
    const double scale = 1.0 / static_cast<double>(batch->size());
    for (const auto& be : *batch) {
      ForwardContext<float> ctx;
      const auto logits = net_.forward(be.patch.pixels, ctx);
      const auto res =
          slide_level_loss(logits, be.patch.inherited_label, cfg_.eta, cfg_.beta(), scale);
      loss_sum += res.loss;
      net_.accumulate_backward(ctx, res.dlogits, grads);
      oldest_version = std::min(oldest_version, be.map_version);
      if (be.patch.inherited_label == SlideLabel::Malign) {
        ++malign_patches;
        bool any = false;
        for (const auto v : be.patch.truth_window.v)
          if (v) {
            any = true;
            break;
          }
        if (!any) ++clean_malign;
      }
    }
    TrainStep ts{cfg_.learning_rate, cfg_.batch_size, cfg_.momentum};
    sgd_step(net_, grads, ts, opt_);
    const long step = steps_done_.fetch_add(1) + 1;

    RunLogRow row;
    row.step = step;
    row.loss = loss_sum * scale;
    row.slide_id = slide_id;
    if (malign_patches > 0)
      row.gamma_estimate = static_cast<double>(clean_malign) / static_cast<double>(malign_patches);
    row.buffer_fill = fill;
    row.staleness = step - static_cast<long>(oldest_version);
    log_->add_row(row);

    if (step % cfg_.weight_exchange_period == 0) slot_.publish(net_, static_cast<std::uint64_t>(step));
  }

  const Dataset& ds_;
  PipelineConfig cfg_;
  SegNet<float> net_;
  SgdState<float> opt_;
  SnapshotSlot<float> slot_;
  MapStore store_;
  SlideSelectionState map_select_, train_select_;
  ShuffleBuffer<detail::BufferEntry> buffer_;
  std::mutex buffer_mu_;
  Rng map_rng_, train_rng_;
  std::shared_ptr<RunLog> log_;
  std::atomic<long> steps_done_{0};
  long map_visits_ = 0;
  long train_visits_ = 0;
  std::atomic<bool> stop_{false};
  bool buffer_starved_ = false;
};

inline TrainResult run_training(const Dataset& ds, const NetworkConfig& ncfg,
                                const PipelineConfig& cfg,
                                PipelineMode mode = PipelineMode::Concurrent) {
  PipelineRunner runner(ds, ncfg, cfg);
  return runner.run(mode);
}

}  // namespace weakseg
