// Desk-scale supervised training: cross-entropy, AdamW, cosine schedule,
// CIFAR-10 binary ingestion, the synthetic quadrant task, and the training
// loop (optionally batch-parallel over per-worker model replicas).
#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "coc/model.hpp"
#include "coc/tensor.hpp"

namespace coc {

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean over the batch of -log softmax at the true class, stabilized by
// row-max subtraction.
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  detail::require_rank2(logits, "cross_entropy");
  const int b = logits.rows(), k = logits.cols();
  if (static_cast<int>(labels.size()) != b) throw shape_error("cross_entropy: label count != batch");
  for (int y : labels)
    if (y < 0 || y >= k) throw index_error("cross_entropy: label out of range");

  std::vector<S> probs(static_cast<std::size_t>(b) * k);
  S total = 0;
  for (int i = 0; i < b; ++i) {
    S mx = logits.at(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits.at(i, j));
    S sum = 0;
    for (int j = 0; j < k; ++j) {
      const S e = std::exp(logits.at(i, j) - mx);
      probs[static_cast<std::size_t>(i) * k + j] = e;
      sum += e;
    }
    for (int j = 0; j < k; ++j) probs[static_cast<std::size_t>(i) * k + j] /= sum;
    total += std::log(sum) - (logits.at(i, labels[static_cast<std::size_t>(i)]) - mx);
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(b));

  bool g = detail::wants_grad(logits);
  auto sl = logits.storage(), so = out.storage();
  auto lab = labels;
  detail::record_op<S>("cross_entropy", {&logits}, out, [sl, so, g, probs, lab, b, k] {
    if (so->grad.empty() || !g) return;
    sl->ensure_grad();
    const S d = so->grad[0] / static_cast<S>(b);
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < k; ++j)
        sl->grad[static_cast<std::size_t>(i) * k + j] +=
            d * (probs[static_cast<std::size_t>(i) * k + j] - (j == lab[static_cast<std::size_t>(i)] ? S(1) : S(0)));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.05;
  double eps = 1e-8;
};

struct OptimState {
  OptimHyper hyper;
  std::vector<std::vector<double>> m, v;  // first/second moments per parameter
  long long step = 0;
};

template <class S>
OptimState make_optim_state(const Model<S>& model, OptimHyper hyper) {
  OptimState st;
  st.hyper = hyper;
  for (const auto& [name, p] : model.registry) {
    st.m.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    st.v.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
  }
  return st;
}

// Decoupled weight decay AdamW with bias correction. Gradients are read from
// each parameter's grad buffer.
template <class S>
void adamw_step(std::vector<std::pair<std::string, Tensor<S>>>& params, OptimState& st, double lr) {
  if (params.size() != st.m.size()) throw contract_error("adamw_step: state/parameter mismatch");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.hyper.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.hyper.beta2, static_cast<double>(st.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<S>& p = params[pi].second;
    const std::vector<S> g = p.grad();
    auto& m = st.m[pi];
    auto& v = st.v[pi];
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[static_cast<std::size_t>(i)]);
      m[static_cast<std::size_t>(i)] = st.hyper.beta1 * m[static_cast<std::size_t>(i)] + (1.0 - st.hyper.beta1) * gi;
      v[static_cast<std::size_t>(i)] = st.hyper.beta2 * v[static_cast<std::size_t>(i)] + (1.0 - st.hyper.beta2) * gi * gi;
      const double mhat = m[static_cast<std::size_t>(i)] / bc1;
      const double vhat = v[static_cast<std::size_t>(i)] / bc2;
      double x = static_cast<double>(p.data()[i]);
      x -= lr * (mhat / (std::sqrt(vhat) + st.hyper.eps) + st.hyper.weight_decay * x);
      p.data()[i] = static_cast<S>(x);
    }
  }
}

// Linear warmup to base_lr, then half-cosine decay to zero at total_steps.
inline double cosine_lr(long long step, long long total_steps, double base_lr, long long warmup_steps) {
  if (total_steps <= 0) return base_lr;
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(std::max<long long>(1, total_steps - warmup_steps));
  return 0.5 * base_lr * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct Dataset {
  int h = 0, w = 0, classes = 0;
  std::vector<float> images;  // n * h * w * 3, values in [0,1]
  std::vector<int> labels;
  int size() const { return static_cast<int>(labels.size()); }
  const float* image(int i) const {
    return images.data() + static_cast<std::size_t>(i) * h * w * 3;
  }
  Dataset subset(int count) const {
    Dataset d;
    d.h = h;
    d.w = w;
    d.classes = classes;
    count = std::min(count, size());
    d.images.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(count) * h * w * 3);
    d.labels.assign(labels.begin(), labels.begin() + count);
    return d;
  }
};

namespace detail {
// CIFAR-10 binary record: 1 label byte then 3072 pixel bytes (three 32x32
// planes, R then G then B).
inline void read_cifar_file(const std::string& path, Dataset& ds) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error("cannot open CIFAR batch: " + path);
  is.seekg(0, std::ios::end);
  const auto bytes = static_cast<long long>(is.tellg());
  is.seekg(0);
  constexpr long long kRecord = 3073;
  if (bytes % kRecord != 0 || bytes == 0)
    throw format_error("CIFAR batch " + path + ": size " + std::to_string(bytes) +
                       " is not a multiple of " + std::to_string(kRecord));
  const long long records = bytes / kRecord;
  std::vector<unsigned char> buf(static_cast<std::size_t>(kRecord));
  for (long long r = 0; r < records; ++r) {
    is.read(reinterpret_cast<char*>(buf.data()), kRecord);
    if (!is) throw format_error("CIFAR batch " + path + ": truncated read");
    const int label = buf[0];
    if (label > 9) throw format_error("CIFAR batch " + path + ": label byte out of range");
    ds.labels.push_back(label);
    const std::size_t base = ds.images.size();
    ds.images.resize(base + 32 * 32 * 3);
    for (int p = 0; p < 32 * 32; ++p)
      for (int ch = 0; ch < 3; ++ch)
        ds.images[base + static_cast<std::size_t>(p) * 3 + ch] =
            static_cast<float>(buf[1 + ch * 1024 + p]) / 255.0f;
  }
}
}  // namespace detail

inline std::pair<Dataset, Dataset> load_cifar10(const std::string& dir) {
  Dataset train, test;
  train.h = train.w = test.h = test.w = 32;
  train.classes = test.classes = 10;
  for (int i = 1; i <= 5; ++i)
    detail::read_cifar_file(dir + "/data_batch_" + std::to_string(i) + ".bin", train);
  detail::read_cifar_file(dir + "/test_batch.bin", test);
  return {std::move(train), std::move(test)};
}

// Writes a dataset back out in the CIFAR-10 binary record layout.
inline void save_cifar_batch(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw format_error("cannot write CIFAR batch: " + path);
  for (int i = 0; i < ds.size(); ++i) {
    const unsigned char label = static_cast<unsigned char>(ds.labels[static_cast<std::size_t>(i)]);
    os.write(reinterpret_cast<const char*>(&label), 1);
    const float* img = ds.image(i);
    for (int ch = 0; ch < 3; ++ch)
      for (int p = 0; p < 32 * 32; ++p) {
        const float v = img[static_cast<std::size_t>(p) * 3 + ch];
        const unsigned char b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        os.write(reinterpret_cast<const char*>(&b), 1);
      }
  }
}

// Noise background with one solid bright patch in a random quadrant; the
// label is the quadrant, so the task is unsolvable without positions.
inline Dataset synthetic_quadrant_dataset(int n, int image_size, unsigned seed) {
  if (image_size < 8) throw config_error("synthetic_quadrant_dataset: image too small");
  Dataset ds;
  ds.h = ds.w = image_size;
  ds.classes = 4;
  ds.images.resize(static_cast<std::size_t>(n) * image_size * image_size * 3);
  ds.labels.resize(static_cast<std::size_t>(n));
  std::mt19937 rng(seed);
  const int half = image_size / 2;
  for (int i = 0; i < n; ++i) {
    float* img = ds.images.data() + static_cast<std::size_t>(i) * image_size * image_size * 3;
    for (int p = 0; p < image_size * image_size * 3; ++p)
      img[p] = static_cast<float>(rng_uniform(rng, 0.0, 0.35));
    const int q = static_cast<int>(rng() % 4);
    ds.labels[static_cast<std::size_t>(i)] = q;
    const int qr = (q / 2) * half, qc = (q % 2) * half;
    const int max_side = std::max(3, half - 2);
    const int side = 3 + static_cast<int>(rng() % static_cast<unsigned>(max_side - 2));
    const int r0 = qr + static_cast<int>(rng() % static_cast<unsigned>(half - side + 1));
    const int c0 = qc + static_cast<int>(rng() % static_cast<unsigned>(half - side + 1));
    const float cr = static_cast<float>(rng_uniform(rng, 0.75, 1.0));
    const float cg = static_cast<float>(rng_uniform(rng, 0.75, 1.0));
    const float cb = static_cast<float>(rng_uniform(rng, 0.75, 1.0));
    for (int r = r0; r < r0 + side; ++r)
      for (int c = c0; c < c0 + side; ++c) {
        float* px = img + (static_cast<std::size_t>(r) * image_size + c) * 3;
        px[0] = cr;
        px[1] = cg;
        px[2] = cb;
      }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
  int epochs = 20;
  int batch = 64;
  unsigned seed = 7;
  OptimHyper hyper;
  int warmup_epochs = 2;
  int threads = 1;
  std::string out_dir;             // empty: no checkpoints/log files
  int checkpoint_every = 5;
  double stop_at_train_acc = -1.0; // early stop once reached (<0: never)
  bool eval_each_epoch = true;
};

struct EpochStats {
  int epoch = 0;
  std::string split;
  double loss = 0, accuracy = 0, lr = 0, seconds = 0;
};

struct TrainLog {
  std::vector<std::string> header;  // '#'-prefixed metadata lines
  std::vector<EpochStats> rows;
  double final_train_accuracy() const {
    double a = 0;
    for (const auto& r : rows)
      if (r.split == "train") a = r.accuracy;
    return a;
  }
  double final_test_accuracy() const {
    double a = 0;
    for (const auto& r : rows)
      if (r.split == "test") a = r.accuracy;
    return a;
  }
};

inline void write_log_csv(const TrainLog& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw format_error("cannot write log: " + path);
  for (const auto& h : log.header) os << h << "\n";
  os << "epoch,split,loss,accuracy,lr,seconds\n";
  for (const auto& r : log.rows)
    os << r.epoch << "," << r.split << "," << r.loss << "," << r.accuracy << "," << r.lr << ","
       << r.seconds << "\n";
}

// Seeded Fisher-Yates; std::shuffle is implementation-defined.
inline void shuffle_indices(std::vector<int>& idx, std::mt19937& rng) {
  for (std::size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[rng() % static_cast<unsigned>(i)]);
}

template <class S>
std::pair<double, double> evaluate(const Model<S>& model, const Dataset& ds, int threads = 1) {
  const int n = ds.size();
  if (n == 0) return {0.0, 0.0};
  std::atomic<int> next{0};
  std::vector<double> losses(static_cast<std::size_t>(std::max(1, threads)), 0.0);
  std::vector<long long> correct(static_cast<std::size_t>(std::max(1, threads)), 0);
  auto work = [&](int wi) {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      Tensor<S> logits = forward_one(model, ds.image(i));
      int best = 0;
      for (int j = 1; j < logits.cols(); ++j)
        if (logits.at(0, j) > logits.at(0, best)) best = j;
      if (best == ds.labels[static_cast<std::size_t>(i)]) correct[static_cast<std::size_t>(wi)]++;
      losses[static_cast<std::size_t>(wi)] +=
          static_cast<double>(cross_entropy(logits, {ds.labels[static_cast<std::size_t>(i)]}).item());
    }
  };
  if (threads <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& t : pool) t.join();
  }
  double loss = 0;
  long long corr = 0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    loss += losses[i];
    corr += correct[i];
  }
  return {loss / n, static_cast<double>(corr) / n};
}

template <class S>
TrainLog train(Model<S>& model, const Dataset& train_ds, const Dataset* test_ds, TrainOptions opt) {
  if (train_ds.size() < 1) throw config_error("train: empty dataset");
  if (train_ds.h != model.cfg.input_h || train_ds.w != model.cfg.input_w)
    throw format_error("train: dataset " + std::to_string(train_ds.h) + "x" + std::to_string(train_ds.w) +
                       " does not match model input " + std::to_string(model.cfg.input_h) + "x" +
                       std::to_string(model.cfg.input_w));
  const int threads = std::max(1, opt.threads);
  const long long steps_per_epoch = (train_ds.size() + opt.batch - 1) / opt.batch;
  const long long total_steps = steps_per_epoch * opt.epochs;
  const long long warmup_steps = steps_per_epoch * opt.warmup_epochs;

  OptimState optim = make_optim_state(model, opt.hyper);
  std::vector<Model<S>> replicas;  // workers 1..threads-1; worker 0 uses `model`
  for (int t = 1; t < threads; ++t) replicas.push_back(clone_model(model));

  TrainLog log;
  {
    std::ostringstream h;
    h << "# coc-train seed=" << opt.seed << " epochs=" << opt.epochs << " batch=" << opt.batch
      << " lr=" << opt.hyper.lr << " wd=" << opt.hyper.weight_decay << " warmup_epochs="
      << opt.warmup_epochs << " threads=" << threads;
    const auto& ab = model.cfg.ablation;
    h << " ablate=";
    bool any = false;
    auto flag = [&](bool v, const char* name) {
      if (v) {
        h << (any ? "," : "") << name;
        any = true;
      }
    };
    flag(ab.no_position, "no-position");
    flag(ab.no_cluster_op, "no-cluster-op");
    flag(ab.single_head, "single-head");
    flag(ab.no_partition, "no-partition");
    if (!any) h << "none";
    if (ab.center_update_iters > 0) h << " center_update_iters=" << ab.center_update_iters;
    log.header.push_back(h.str());
  }

  std::vector<int> order(static_cast<std::size_t>(train_ds.size()));
  std::iota(order.begin(), order.end(), 0);
  long long global_step = 0;

  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937 shuffle_rng(opt.seed ^ (static_cast<unsigned>(epoch) * 2654435761u));
    shuffle_indices(order, shuffle_rng);

    double epoch_loss = 0;
    long long epoch_correct = 0;
    double lr = 0;
    for (long long step = 0; step < steps_per_epoch; ++step) {
      const int begin = static_cast<int>(step) * opt.batch;
      const int end = std::min(train_ds.size(), begin + opt.batch);
      const int bsz = end - begin;
      lr = cosine_lr(global_step, total_steps, opt.hyper.lr, warmup_steps);

      for (int t = 1; t < threads; ++t) copy_parameters(replicas[static_cast<std::size_t>(t - 1)], model);
      for (auto& [name, p] : model.registry) p.zero_grad();
      for (auto& r : replicas)
        for (auto& [name, p] : r.registry) p.zero_grad();

      std::vector<double> wloss(static_cast<std::size_t>(threads), 0.0);
      std::vector<long long> wcorrect(static_cast<std::size_t>(threads), 0);
      auto work = [&](int wi) {
        Model<S>& mdl = wi == 0 ? model : replicas[static_cast<std::size_t>(wi - 1)];
        for (int i = begin + wi; i < end; i += threads) {
          const int idx = order[static_cast<std::size_t>(i)];
          Graph<S> graph;
          AutodiffScope<S> scope(graph);
          Tensor<S> logits = forward_one(mdl, train_ds.image(idx));
          int best = 0;
          for (int j = 1; j < logits.cols(); ++j)
            if (logits.at(0, j) > logits.at(0, best)) best = j;
          if (best == train_ds.labels[static_cast<std::size_t>(idx)]) wcorrect[static_cast<std::size_t>(wi)]++;
          Tensor<S> loss = cross_entropy(logits, {train_ds.labels[static_cast<std::size_t>(idx)]});
          wloss[static_cast<std::size_t>(wi)] += static_cast<double>(loss.item());
          backward(loss);  // accumulates into this worker's parameter grads
        }
      };
      if (threads == 1) {
        work(0);
      } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(work, t);
        for (auto& t : pool) t.join();
      }

      // merge worker gradients in worker order, then average over the batch
      for (std::size_t pi = 0; pi < model.registry.size(); ++pi) {
        Tensor<S>& p = model.registry[pi].second;
        S* g = p.grad_data();
        for (int t = 1; t < threads; ++t) {
          const auto rg = replicas[static_cast<std::size_t>(t - 1)].registry[pi].second.grad();
          for (std::int64_t i = 0; i < p.size(); ++i) g[i] += rg[static_cast<std::size_t>(i)];
        }
        for (std::int64_t i = 0; i < p.size(); ++i) g[i] /= static_cast<S>(bsz);
      }

      double batch_loss = 0;
      for (int t = 0; t < threads; ++t) {
        batch_loss += wloss[static_cast<std::size_t>(t)];
        epoch_correct += wcorrect[static_cast<std::size_t>(t)];
      }
      batch_loss /= bsz;
      epoch_loss += batch_loss * bsz;
      if (!std::isfinite(batch_loss)) {
        double gnorm = 0;
        for (auto& [name, p] : model.registry)
          for (S v : p.grad()) gnorm += static_cast<double>(v) * v;
        throw numeric_error("NaN loss at step " + std::to_string(global_step) + " (epoch " +
                            std::to_string(epoch) + ", lr " + std::to_string(lr) + ", grad norm " +
                            std::to_string(std::sqrt(gnorm)) + ")");
      }
      adamw_step(model.registry, optim, lr);
      ++global_step;
    }

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double train_acc = static_cast<double>(epoch_correct) / train_ds.size();
    log.rows.push_back(EpochStats{epoch, "train", epoch_loss / train_ds.size(), train_acc, lr, secs});
    if (test_ds && opt.eval_each_epoch) {
      const auto t1 = std::chrono::steady_clock::now();
      auto [tl, ta] = evaluate(model, *test_ds, threads);
      const double esecs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
      log.rows.push_back(EpochStats{epoch, "test", tl, ta, lr, esecs});
    }
    if (!opt.out_dir.empty()) {
      std::filesystem::create_directories(opt.out_dir);
      if (opt.checkpoint_every > 0 && epoch % opt.checkpoint_every == 0)
        save_checkpoint(model, opt.out_dir + "/model_epoch" + std::to_string(epoch) + ".coc");
      write_log_csv(log, opt.out_dir + "/train_log.csv");
    }
    if (opt.stop_at_train_acc > 0 && train_acc >= opt.stop_at_train_acc) break;
  }
  if (test_ds && !opt.eval_each_epoch) {
    auto [tl, ta] = evaluate(model, *test_ds, threads);
    log.rows.push_back(EpochStats{log.rows.empty() ? 0 : log.rows.back().epoch, "test", tl, ta, 0, 0});
  }
  if (!opt.out_dir.empty()) {
    save_checkpoint(model, opt.out_dir + "/model_final.coc");
    write_log_csv(log, opt.out_dir + "/train_log.csv");
  }
  return log;
}

}  // namespace coc
