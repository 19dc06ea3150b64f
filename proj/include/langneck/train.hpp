#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "langneck/common.hpp"
#include "langneck/data.hpp"
#include "langneck/model.hpp"
#include "langneck/objectives.hpp"
#include "langneck/tensor.hpp"
#include "langneck/vocab.hpp"

namespace langneck {

enum class Variant { plain, token_sim, llm_loss, no_rep_eval, caption_baseline };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::plain: return "plain";
        case Variant::token_sim: return "token_sim";
        case Variant::llm_loss: return "llm_loss";
        case Variant::no_rep_eval: return "no_rep_eval";
        case Variant::caption_baseline: return "caption_baseline";
    }
    throw ArgumentError("unknown variant");
}

inline Variant variant_from_name(const std::string& s) {
    for (Variant v : {Variant::plain, Variant::token_sim, Variant::llm_loss,
                      Variant::no_rep_eval, Variant::caption_baseline})
        if (s == variant_name(v)) return v;
    throw ArgumentError("unknown variant: " + s);
}

enum class Optimizer { sgd, sgd_momentum };

struct TrainConfig {
    std::size_t epochs = 5;
    double lr_prompt = 1e-1;
    double lr_head = 5e-3;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    LossWeights weights;
    std::size_t warmup_epochs = 3;
    double warmup_lr = 3e-3;  // Adam step size for the warm-up phase
    Optimizer optimizer = Optimizer::sgd;

    void validate() const {
        if (epochs < 1) throw ArgumentError("epochs must be >= 1");
        // zero is allowed so a no-op step stays testable
        if (lr_prompt < 0 || lr_head < 0 || warmup_lr < 0)
            throw ArgumentError("learning rates must not be negative");
        if (batch_size < 1) throw ArgumentError("batch size must be >= 1");
    }

    std::string to_string() const {
        std::ostringstream os;
        os << "epochs=" << epochs << ";lr_prompt=" << lr_prompt << ";lr_head=" << lr_head
           << ";batch_size=" << batch_size << ";seed=" << seed
           << ";lambda_sim=" << weights.lambda_sim << ";lambda_llm=" << weights.lambda_llm
           << ";warmup_epochs=" << warmup_epochs << ";warmup_lr=" << warmup_lr
           << ";optimizer=" << (optimizer == Optimizer::sgd ? "sgd" : "sgd_momentum_0.9");
        return os.str();
    }
};

// ---- deterministic parallel map (evaluation fan-out) ----

inline std::size_t worker_count() {
    if (const char* env = std::getenv("LANGNECK_THREADS")) {
        const long n = std::atol(env);
        if (n >= 1) return static_cast<std::size_t>(n);
    }
    return 1;
}

// Applies fn(i) for i in [0, count); results land at fixed indices so the
// thread count never changes the outcome.
template <typename Fn>
inline void parallel_for(std::size_t count, Fn&& fn) {
    const std::size_t threads = std::min(worker_count(), count == 0 ? std::size_t{1} : count);
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mu;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < count; i += threads) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

// ---- SGD with optional momentum, per-parameter learning rates ----

class SgdOptimizer {
public:
    SgdOptimizer(Optimizer kind, double momentum = 0.9) : kind_(kind), mu_(momentum) {}

    void step(const std::vector<std::pair<Tensor, double>>& params_and_lrs) {
        for (auto& [t, lr] : params_and_lrs) {
            auto& value = const_cast<Tensor&>(t).data();
            auto& grad = t.grad();
            if (kind_ == Optimizer::sgd) {
                for (std::size_t i = 0; i < value.size(); ++i) value[i] -= lr * grad[i];
            } else {
                auto& vel = velocity_[t.node().get()];
                if (vel.size() != value.size()) vel.assign(value.size(), 0.0);
                for (std::size_t i = 0; i < value.size(); ++i) {
                    vel[i] = mu_ * vel[i] + grad[i];
                    value[i] -= lr * vel[i];
                }
            }
            const_cast<Tensor&>(t).zero_grad();
        }
    }

private:
    Optimizer kind_;
    double mu_;
    std::unordered_map<void*, std::vector<double>> velocity_;
};

// Adam, used only inside warm-up. The captioning objective has a long
// "grammar" plateau (slot identity is learned long before image content);
// plain SGD takes hundreds of epochs to escape it, Adam a fraction of one.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

    void step(const std::vector<Tensor>& params) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (const Tensor& p : params) {
            auto& value = const_cast<Tensor&>(p).data();
            auto& grad = p.grad();
            State& s = state_[p.node().get()];
            if (s.m.size() != value.size()) {
                s.m.assign(value.size(), 0.0);
                s.v.assign(value.size(), 0.0);
            }
            for (std::size_t i = 0; i < value.size(); ++i) {
                s.m[i] = b1_ * s.m[i] + (1.0 - b1_) * grad[i];
                s.v[i] = b2_ * s.v[i] + (1.0 - b2_) * grad[i] * grad[i];
                value[i] -= lr_ * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
            }
            const_cast<Tensor&>(p).zero_grad();
        }
    }

private:
    struct State {
        std::vector<double> m, v;
    };
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::unordered_map<void*, State> state_;
};

inline void check_loss_finite(double loss) {
    if (!std::isfinite(loss))
        throw NumericError("training diverged: loss is not finite");
}

// ---- warm-up pretraining of the backbone ----

// Teacher-forced next-word prediction of each scene's attribute words
// (input: BOS + prefix, target: the four attribute words). Trains encoder,
// decoder and E jointly, then the caller freezes them.
inline std::vector<double> warmup_pretrain(ModelParams& params,
                                           const std::vector<ImageSample>& dataset,
                                           const Vocabulary& vocab, std::size_t epochs,
                                           std::uint64_t seed, double lr,
                                           std::size_t batch_size = 32) {
    if (dataset.empty()) throw ArgumentError("warmup_pretrain: dataset is empty");
    params.set_backbone_requires_grad(true);
    std::vector<Tensor> group;
    for (auto& [name, t] : params.backbone()) group.push_back(t);

    AdamOptimizer opt(lr);
    std::vector<double> epoch_losses;
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(seed, "warmup-shuffle", epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            const std::size_t end = std::min(start + batch_size, order.size());
            const double inv_batch = 1.0 / static_cast<double>(end - start);
            for (std::size_t k = start; k < end; ++k) {
                const ImageSample& img = dataset[order[k]];
                const auto words = attribute_word_ids(img.spec, vocab);

                Tensor image_emb = encode_image(params, img);

                // content-free task: feed the current soft-prompt values as a
                // constant input and require the decoder to read the image
                // through cross-attention, predicting the class-relevant
                // attributes (color/shape alternating) at every slot. This is
                // the regime the classifier phase runs in, so it is the main
                // warm-up objective.
                std::vector<std::size_t> cf_targets;
                for (std::size_t s = 0; s < params.cfg.n_prompt; ++s)
                    cf_targets.push_back(words[1 + (s % 2)]);
                Tensor cf_input = Tensor::from(
                    {params.cfg.n_prompt, params.cfg.dim},
                    std::vector<double>(params.soft_prompt.data()));
                Tensor cf_logits = decode_logits(params, cf_input, &image_emb);
                Tensor loss = cross_entropy(cf_logits, cf_targets);

                // curriculum: in the first epoch only, mix in teacher-forced
                // BOS captioning so the decoder first learns the vocabulary
                // and the image attributes in the easier conditioned setting.
                if (epoch == 0) {
                    std::vector<std::size_t> input_ids = {Vocabulary::kBos};
                    input_ids.insert(input_ids.end(), words.begin(), words.end() - 1);
                    Tensor cap_logits = decode_logits(
                        params, embedding_lookup(params.embed, input_ids), &image_emb);
                    loss = add(scale(cross_entropy(cap_logits, words), 0.5),
                               scale(loss, 0.5));
                }
                loss = scale(loss, inv_batch);
                check_loss_finite(loss.item());
                total += loss.item() * static_cast<double>(end - start);
                loss.backward();
            }
            opt.step(group);
        }
        epoch_losses.push_back(total / static_cast<double>(order.size()));
    }
    return epoch_losses;
}

// ---- evaluation ----

struct EvalPaths {
    bool soft = false;
    bool hard = false;
    bool no_rep = false;
};

struct EvalStats {
    double acc_soft = 0.0;
    double acc_hard = 0.0;
    double acc_norep = 0.0;
    double mean_cosine = 0.0;   // mean pairwise cosine of emitted soft words
    double mean_llm_nll = 0.0;  // NLL of the emitted hard sequence under re-read
    std::size_t duplicate_violations = 0;  // no-rep sequences with dup/special ids
    std::size_t count = 0;
};

namespace detail {

inline std::size_t argmax_index(const Tensor& logits) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j)
        if (logits.data()[j] > logits.data()[best]) best = j;
    return best;
}

struct PerSampleEval {
    int soft_ok = 0, hard_ok = 0, norep_ok = 0;
    double cosine = 0.0, llm_nll = 0.0;
    int violation = 0;
};

}  // namespace detail

// Accuracy and sequence statistics over one dataset, optionally corrupted.
// Fan-out across LANGNECK_THREADS workers; per-index results are reduced
// in fixed order.
inline EvalStats evaluate(const ModelParams& params, const std::vector<ImageSample>& dataset,
                          const EvalPaths& paths, const Corruption* corruption = nullptr,
                          std::uint64_t seed = 0) {
    if (dataset.empty()) throw ArgumentError("evaluate: dataset is empty");
    std::vector<detail::PerSampleEval> results(dataset.size());
    parallel_for(dataset.size(), [&](std::size_t i) {
        NoGradGuard no_grad;
        ImageSample img = corruption
            ? apply_corruption(dataset[i], *corruption, derive_seed(seed, "eval-corrupt", i))
            : dataset[i];
        Tensor image_emb = encode_image(params, img);
        auto [class_logits, bottleneck] = forward_soft(params, image_emb);
        detail::PerSampleEval& r = results[i];
        if (paths.soft)
            r.soft_ok = detail::argmax_index(class_logits) == img.label ? 1 : 0;
        if (paths.hard) {
            auto [hard_logits, ids] = forward_hard(params, image_emb);
            r.hard_ok = detail::argmax_index(hard_logits) == img.label ? 1 : 0;
        }
        if (paths.no_rep) {
            auto ids = sample_no_repetition(params, image_emb, params.cfg.n_prompt);
            std::vector<std::size_t> sorted = ids;
            std::sort(sorted.begin(), sorted.end());
            for (std::size_t k = 0; k < sorted.size(); ++k)
                if (sorted[k] < Vocabulary::kNumSpecial || (k > 0 && sorted[k] == sorted[k - 1]))
                    r.violation = 1;
            Tensor pooled = mean_axis0(embedding_lookup(params.embed, ids));
            r.norep_ok = detail::argmax_index(classify(params, pooled)) == img.label ? 1 : 0;
        }
        r.cosine = token_similarity_loss(bottleneck.soft_words).item();
        r.llm_nll = llm_loss(params, bottleneck).item();
    });

    EvalStats stats;
    stats.count = dataset.size();
    for (const auto& r : results) {
        stats.acc_soft += r.soft_ok;
        stats.acc_hard += r.hard_ok;
        stats.acc_norep += r.norep_ok;
        stats.mean_cosine += r.cosine;
        stats.mean_llm_nll += r.llm_nll;
        stats.duplicate_violations += r.violation;
    }
    const double inv = 1.0 / static_cast<double>(dataset.size());
    stats.acc_soft *= inv;
    stats.acc_hard *= inv;
    stats.acc_norep *= inv;
    stats.mean_cosine *= inv;
    stats.mean_llm_nll *= inv;
    return stats;
}

// Caption-baseline classification: pooled embeddings of the warm-up
// captioner's greedy caption, head only.
inline double evaluate_caption_baseline(const ModelParams& params,
                                        const std::vector<ImageSample>& dataset,
                                        const Corruption* corruption = nullptr,
                                        std::uint64_t seed = 0) {
    if (dataset.empty()) throw ArgumentError("evaluate: dataset is empty");
    std::vector<int> ok(dataset.size(), 0);
    parallel_for(dataset.size(), [&](std::size_t i) {
        NoGradGuard no_grad;
        ImageSample img = corruption
            ? apply_corruption(dataset[i], *corruption, derive_seed(seed, "eval-corrupt", i))
            : dataset[i];
        Tensor image_emb = encode_image(params, img);
        auto ids = caption_greedy(params, image_emb, 4);
        Tensor pooled = mean_axis0(embedding_lookup(params.embed, ids));
        ok[i] = detail::argmax_index(classify(params, pooled)) == img.label ? 1 : 0;
    });
    double acc = 0.0;
    for (int v : ok) acc += v;
    return acc / static_cast<double>(dataset.size());
}

// ---- metrics report ----

struct ReportRow {
    std::string method;
    std::string corruption;  // "clean" or a corruption kind
    int severity = 0;
    double accuracy = 0.0;
    double cosine = 0.0;
    double llm_nll = 0.0;
};

struct MetricsReport {
    std::string method;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string version = "langneck-1";
    std::vector<double> epoch_class_loss, epoch_sim_loss, epoch_llm_loss;
    std::vector<double> warmup_loss;
    double val_soft_acc = 0.0, val_hard_acc = 0.0, val_norep_acc = 0.0;
    double mean_cosine = 0.0, mean_llm_nll = 0.0;
    std::vector<ReportRow> rows;
};

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(12) << v;
    return os.str();
}

// Fixed column order: method, corruption, severity, accuracy, cosine, llm_nll.
inline std::string report_csv(const MetricsReport& r) {
    std::ostringstream os;
    os << "method,corruption,severity,accuracy,cosine,llm_nll\n";
    for (const auto& row : r.rows)
        os << row.method << ',' << row.corruption << ',' << row.severity << ','
           << format_double(row.accuracy) << ',' << format_double(row.cosine) << ','
           << format_double(row.llm_nll) << '\n';
    return os.str();
}

// ---- prompt + head training ----

struct TrainResult {
    MetricsReport report;
    std::string best_checkpoint;  // path of the best-hard-accuracy epoch
};

namespace detail {

inline void write_best_link(const std::string& out_dir, const std::string& best_file) {
    namespace fs = std::filesystem;
    const fs::path link = fs::path(out_dir) / "best.lbck";
    std::error_code ec;
    fs::remove(link, ec);
    fs::create_symlink(fs::path(best_file).filename(), link, ec);
    if (ec) fs::copy_file(best_file, link, fs::copy_options::overwrite_existing);
}

}  // namespace detail

// Trains exactly the soft prompt and the linear head (or, for the
// caption-baseline variant, the head alone on pooled caption embeddings).
// The backbone must already be frozen; image embeddings are computed once
// and reused across epochs. Writes one checkpoint per epoch when out_dir
// is non-empty, plus a best-hard-accuracy manifest link.
inline TrainResult train(ModelParams& params, const TrainConfig& cfg, Variant variant,
                         const std::vector<ImageSample>& train_set,
                         const std::vector<ImageSample>& val_set, const Vocabulary& vocab,
                         const std::string& out_dir = "") {
    cfg.validate();
    if (train_set.empty() || val_set.empty()) throw ArgumentError("train: empty dataset");
    if (params.cfg.vocab_size != vocab.size())
        throw ConfigError("train: model vocabulary size does not match vocabulary");
    for (auto& [name, t] : params.backbone())
        if (t.requires_grad()) throw ConfigError("train: backbone must be frozen");

    const bool caption_mode = variant == Variant::caption_baseline;
    LossWeights weights = cfg.weights;
    if (variant == Variant::plain || variant == Variant::no_rep_eval || caption_mode)
        weights = LossWeights{0.0, 0.0};
    else if (variant == Variant::token_sim)
        weights.lambda_llm = 0.0;
    else if (variant == Variant::llm_loss)
        weights.lambda_sim = 0.0;

    // frozen encoder: embed every image once
    std::vector<Tensor> train_emb(train_set.size()), val_emb(val_set.size());
    parallel_for(train_set.size(), [&](std::size_t i) {
        NoGradGuard no_grad;
        train_emb[i] = encode_image(params, train_set[i]);
    });
    parallel_for(val_set.size(), [&](std::size_t i) {
        NoGradGuard no_grad;
        val_emb[i] = encode_image(params, val_set[i]);
    });

    // caption baseline: the head's inputs are fixed pooled caption vectors
    std::vector<Tensor> caption_pooled;
    if (caption_mode) {
        caption_pooled.resize(train_set.size());
        parallel_for(train_set.size(), [&](std::size_t i) {
            NoGradGuard no_grad;
            auto ids = caption_greedy(params, train_emb[i], 4);
            caption_pooled[i] = mean_axis0(embedding_lookup(params.embed, ids));
        });
    }

    std::vector<std::pair<Tensor, double>> groups;
    if (!caption_mode) groups.emplace_back(params.soft_prompt, cfg.lr_prompt);
    groups.emplace_back(params.head_w, cfg.lr_head);
    groups.emplace_back(params.head_b, cfg.lr_head);
    SgdOptimizer opt(cfg.optimizer);

    TrainResult result;
    MetricsReport& report = result.report;
    report.method = variant_name(variant);
    report.seed = cfg.seed;
    report.config_hash = std::to_string(
        fnv1a(cfg.to_string() + "|" + params.cfg.to_string() + "|" + variant_name(variant)));

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    double best_hard = -1.0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, "train-shuffle", epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        double sum_cls = 0.0, sum_sim = 0.0, sum_llm = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(start + cfg.batch_size, order.size());
            const double inv_batch = 1.0 / static_cast<double>(end - start);
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t idx = order[k];
                const std::size_t label = train_set[idx].label;
                Tensor loss;
                if (caption_mode) {
                    Tensor logits = reshape(classify(params, caption_pooled[idx]), {1, params.cfg.classes});
                    loss = classification_loss(logits, {label});
                    sum_cls += loss.item();
                } else {
                    auto [class_logits, bottleneck] = forward_soft(params, train_emb[idx]);
                    Tensor cls = classification_loss(reshape(class_logits, {1, params.cfg.classes}),
                                                     {label});
                    sum_cls += cls.item();
                    Tensor sim, llm;
                    if (weights.lambda_sim != 0.0) {
                        sim = token_similarity_loss(bottleneck.soft_words);
                        sum_sim += sim.item();
                    }
                    if (weights.lambda_llm != 0.0) {
                        llm = llm_loss(params, bottleneck);
                        sum_llm += llm.item();
                    }
                    loss = total_loss(cls, sim, llm, weights);
                }
                check_loss_finite(loss.item());
                scale(loss, inv_batch).backward();
            }
            opt.step(groups);
        }
        const double inv_n = 1.0 / static_cast<double>(order.size());
        report.epoch_class_loss.push_back(sum_cls * inv_n);
        report.epoch_sim_loss.push_back(sum_sim * inv_n);
        report.epoch_llm_loss.push_back(sum_llm * inv_n);

        double hard_acc;
        if (caption_mode) {
            hard_acc = evaluate_caption_baseline(params, val_set);
            report.val_hard_acc = hard_acc;
        } else {
            EvalPaths paths{true, true, variant == Variant::no_rep_eval};
            EvalStats stats = evaluate(params, val_set, paths);
            hard_acc = stats.acc_hard;
            report.val_soft_acc = stats.acc_soft;
            report.val_hard_acc = stats.acc_hard;
            report.val_norep_acc = stats.acc_norep;
            report.mean_cosine = stats.mean_cosine;
            report.mean_llm_nll = stats.mean_llm_nll;
        }

        if (!out_dir.empty()) {
            const std::string path =
                (std::filesystem::path(out_dir) / ("ckpt_epoch_" + std::to_string(epoch + 1) + ".lbck"))
                    .string();
            save_checkpoint(path, params, vocab.hash());
            if (hard_acc > best_hard) {
                best_hard = hard_acc;
                result.best_checkpoint = path;
            }
        } else if (hard_acc > best_hard) {
            best_hard = hard_acc;
        }
    }
    if (!out_dir.empty()) detail::write_best_link(out_dir, result.best_checkpoint);

    report.rows.push_back({report.method, "clean", 0, report.val_hard_acc,
                           report.mean_cosine, report.mean_llm_nll});
    return result;
}

}  // namespace langneck
