// langneck: end-to-end differentiable image classification through a text
// bottleneck. One binary, five subcommands covering the whole pipeline.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "langneck/report.hpp"
#include "langneck/train.hpp"

namespace fs = std::filesystem;
using namespace langneck;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitArgument = 2;
constexpr int kExitArtifact = 3;
constexpr int kExitNumeric = 4;

struct GenDataArgs {
    std::uint64_t seed = 0;
    std::size_t train = 2048;
    std::size_t val = 512;
    std::string out;
};

struct ModelArgs {
    std::size_t dim = 64;
    std::size_t enc_blocks = 2;
    std::size_t dec_blocks = 2;
    std::size_t heads = 4;
    std::size_t n_prompt = 8;
    std::size_t patch = 4;

    ModelConfig to_config(std::size_t vocab_size) const {
        ModelConfig cfg;
        cfg.vocab_size = vocab_size;
        cfg.dim = dim;
        cfg.enc_blocks = enc_blocks;
        cfg.dec_blocks = dec_blocks;
        cfg.heads = heads;
        cfg.n_prompt = n_prompt;
        cfg.patch = patch;
        return cfg;
    }
};

struct TrainArgs {
    std::string data;
    std::string out;
    std::string variant = "plain";
    std::string optimizer = "sgd";
    TrainConfig cfg;
    ModelArgs model;
};

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string vocab;
    std::string path = "hard";
    std::string out;
    std::uint64_t seed = 0;
};

struct SampleArgs {
    std::string checkpoint;
    std::string data;
    std::string vocab;
    std::string path = "hard";
    std::size_t count = 8;
};

struct GradCheckArgs {
    double h = 1e-4;
    bool sabotage = false;
};

std::vector<ImageSample> load_split(const std::string& path, const Vocabulary& vocab) {
    LoadedDataset ds = load_dataset(path);
    if (ds.vocab_checksum != vocab.checksum16())
        throw ConfigError("dataset " + path + " was generated against a different vocabulary");
    return std::move(ds.samples);
}

std::string class_name(std::size_t label, const Vocabulary& vocab) {
    SceneSpec spec;
    spec.shape = static_cast<ShapeKind>(label / 4);
    spec.color = static_cast<ColorKind>(label % 4);
    const auto words = attribute_word_ids(spec, vocab);
    return vocab.token(words[1]) + " " + vocab.token(words[2]);
}

std::string join_tokens(const std::vector<std::size_t>& ids, const Vocabulary& vocab) {
    std::string out;
    for (std::size_t id : ids) {
        if (!out.empty()) out += ' ';
        out += vocab.token(id);
    }
    return out;
}

int cmd_gen_data(const GenDataArgs& a) {
    if (a.train == 0 || a.val == 0)
        throw ArgumentError("--train and --val must be positive");
    fs::create_directories(a.out);
    Vocabulary vocab = build_vocabulary();
    vocab.save((fs::path(a.out) / "vocab.lbvc").string());
    save_dataset((fs::path(a.out) / "train.lbds").string(),
                 generate_dataset(a.seed, a.train, "train"), vocab.checksum16());
    save_dataset((fs::path(a.out) / "val.lbds").string(),
                 generate_dataset(a.seed, a.val, "val"), vocab.checksum16());

    const std::string config = "seed=" + std::to_string(a.seed) +
                               ";train=" + std::to_string(a.train) +
                               ";val=" + std::to_string(a.val);
    nlohmann::json manifest;
    manifest["config"] = config;
    manifest["config_hash"] = std::to_string(fnv1a(config));
    manifest["vocab_hash"] = std::to_string(vocab.hash());
    manifest["files"] = {"train.lbds", "val.lbds", "vocab.lbvc"};
    write_file((fs::path(a.out) / "manifest.json").string(), manifest.dump(2) + "\n");
    std::cout << "wrote " << a.train << " train / " << a.val << " val samples to " << a.out
              << " (config hash " << manifest["config_hash"].get<std::string>() << ")\n";
    return kExitOk;
}

int cmd_train(TrainArgs& a) {
    a.cfg.validate();
    Vocabulary vocab = Vocabulary::load((fs::path(a.data) / "vocab.lbvc").string());
    auto train_set = load_split((fs::path(a.data) / "train.lbds").string(), vocab);
    auto val_set = load_split((fs::path(a.data) / "val.lbds").string(), vocab);
    const Variant variant = variant_from_name(a.variant);
    a.cfg.optimizer = a.optimizer == "sgd_momentum" ? Optimizer::sgd_momentum : Optimizer::sgd;

    fs::create_directories(a.out);
    ModelParams params = init_model(a.model.to_config(vocab.size()), a.cfg.seed);
    std::vector<double> warmup_losses;
    if (a.cfg.warmup_epochs > 0)
        warmup_losses = warmup_pretrain(params, train_set, vocab, a.cfg.warmup_epochs,
                                        a.cfg.seed, a.cfg.warmup_lr, a.cfg.batch_size);
    params.freeze_backbone();

    TrainResult res = train(params, a.cfg, variant, train_set, val_set, vocab, a.out);
    res.report.warmup_loss = warmup_losses;
    emit_report(res.report, (fs::path(a.out) / "report.csv").string(),
                (fs::path(a.out) / "report.json").string());

    std::cout << "method " << res.report.method << " (config hash " << res.report.config_hash
              << ")\n";
    if (variant == Variant::caption_baseline) {
        std::cout << "caption accuracy " << res.report.val_hard_acc << "\n";
    } else {
        std::cout << "soft accuracy " << res.report.val_soft_acc << "\nhard accuracy "
                  << res.report.val_hard_acc << "\n";
        if (variant == Variant::no_rep_eval)
            std::cout << "no-rep accuracy " << res.report.val_norep_acc << "\n";
    }
    std::cout << "best checkpoint " << res.best_checkpoint << "\n";
    return kExitOk;
}

int cmd_eval(const EvalArgs& a) {
    LoadedCheckpoint ckpt = load_checkpoint(a.checkpoint);
    Vocabulary vocab = Vocabulary::load(a.vocab);
    if (ckpt.vocab_hash != vocab.hash())
        throw ConfigError("checkpoint was trained against a different vocabulary");
    auto data = load_split(a.data, vocab);

    EvalPaths paths;
    if (a.path == "soft") paths.soft = true;
    else if (a.path == "hard") paths.hard = true;
    else if (a.path == "no_rep") paths.no_rep = true;
    else throw ArgumentError("--path must be soft, hard or no_rep");

    MetricsReport report;
    report.method = a.path;
    report.seed = a.seed;
    report.config_hash = std::to_string(fnv1a(ckpt.params.cfg.to_string() + "|" + a.path));

    auto accuracy_of = [&](const EvalStats& s) {
        return paths.soft ? s.acc_soft : paths.hard ? s.acc_hard : s.acc_norep;
    };
    std::size_t violations = 0;
    EvalStats clean = evaluate(ckpt.params, data, paths, nullptr, a.seed);
    violations += clean.duplicate_violations;
    report.rows.push_back({a.path, "clean", 0, accuracy_of(clean), clean.mean_cosine,
                           clean.mean_llm_nll});
    for (CorruptionKind kind : all_corruption_kinds())
        for (int severity = 1; severity <= 5; ++severity) {
            Corruption c{kind, severity};
            EvalStats s = evaluate(ckpt.params, data, paths, &c, a.seed);
            violations += s.duplicate_violations;
            report.rows.push_back({a.path, corruption_name(kind), severity, accuracy_of(s),
                                   s.mean_cosine, s.mean_llm_nll});
        }

    std::cout << report_csv(report);
    if (paths.no_rep)
        std::cout << "duplicate-token violations: " << violations << "\n";
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        emit_report(report, (fs::path(a.out) / "report.csv").string(),
                    (fs::path(a.out) / "report.json").string());
    }
    return kExitOk;
}

int cmd_sample(const SampleArgs& a) {
    if (a.path != "hard" && a.path != "no_rep")
        throw ArgumentError("--path must be hard or no_rep");
    LoadedCheckpoint ckpt = load_checkpoint(a.checkpoint);
    Vocabulary vocab = Vocabulary::load(a.vocab);
    if (ckpt.vocab_hash != vocab.hash())
        throw ConfigError("checkpoint was trained against a different vocabulary");
    auto data = load_split(a.data, vocab);
    const std::size_t count = std::min(a.count, data.size());

    NoGradGuard no_grad;
    const ModelParams& p = ckpt.params;
    for (std::size_t i = 0; i < count; ++i) {
        Tensor image_emb = encode_image(p, data[i]);
        std::vector<std::size_t> ids;
        Tensor class_logits;
        if (a.path == "hard") {
            auto [logits, hard_ids] = forward_hard(p, image_emb);
            class_logits = logits;
            ids = hard_ids;
        } else {
            ids = sample_no_repetition(p, image_emb, p.cfg.n_prompt);
            class_logits = classify(p, mean_axis0(embedding_lookup(p.embed, ids)));
        }
        const std::size_t pred = detail::argmax_index(class_logits);
        std::cout << "image " << i << " | " << join_tokens(ids, vocab) << " | predicted "
                  << class_name(pred, vocab) << " | true " << class_name(data[i].label, vocab)
                  << "\n";
    }
    return kExitOk;
}

int cmd_grad_check(const GradCheckArgs& a) {
    if (a.h <= 0) throw ArgumentError("--h must be positive");
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.dim = 8;
    cfg.enc_blocks = 1;
    cfg.dec_blocks = 1;
    cfg.heads = 2;
    cfg.n_prompt = 4;
    cfg.patch = 4;
    cfg.image = 16;
    cfg.classes = 16;
    ModelParams params = init_model(cfg, 1234);
    // check at a generic, smooth point: a non-zero head exercises the
    // classification path, and damping the backbone keeps the higher-order
    // terms small enough that central differences at this h are meaningful
    Rng head_rng(derive_seed(1234, "grad-check-head"));
    for (auto& v : params.head_w.data()) v = head_rng.normal() * 0.5;
    for (auto& v : params.head_b.data()) v = head_rng.normal() * 0.1;
    for (auto& [name, t] : params.backbone())
        for (auto& v : const_cast<Tensor&>(t).data()) v *= 0.5;
    params.freeze_backbone();

    ImageSample img;
    img.pixels.resize(cfg.image * cfg.image * 3);
    Rng rng(derive_seed(1234, "grad-check-image"));
    for (auto& px : img.pixels) px = static_cast<float>(rng.uniform());
    img.label = 5;

    const LossWeights weights{0.1, 0.1};
    auto loss_value = [&]() {
        Tensor image_emb = encode_image(params, img);
        auto [class_logits, bottleneck] = forward_soft(params, image_emb);
        Tensor cls = classification_loss(reshape(class_logits, {1, cfg.classes}), {img.label});
        Tensor sim = token_similarity_loss(bottleneck.soft_words);
        Tensor llm = llm_loss(params, bottleneck);
        return total_loss(cls, sim, llm, weights);
    };

    params.zero_grads();
    sabotage_backward() = a.sabotage;
    loss_value().backward();
    sabotage_backward() = false;

    double max_err = 0.0;
    for (Tensor t : params.trainable()) {
        const std::vector<double> analytic = t.grad();
        for (std::size_t i = 0; i < t.size(); ++i) {
            NoGradGuard no_grad;
            const double orig = t.data()[i];
            t.data()[i] = orig + a.h;
            const double up = loss_value().item();
            t.data()[i] = orig - a.h;
            const double dn = loss_value().item();
            t.data()[i] = orig;
            const double numeric = (up - dn) / (2.0 * a.h);
            const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-6});
            max_err = std::max(max_err, std::fabs(analytic[i] - numeric) / denom);
        }
    }
    std::cout << "h " << a.h << "\nmax relative error " << max_err << "\n"
              << (max_err < 1e-4 ? "pass" : "fail") << "\n";
    return max_err < 1e-4 ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"image classification through a text bottleneck"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "generate dataset + vocabulary files");
    gen_cmd->set_config("--config", "", "key = value config file, overridden by flags");
    gen_cmd->add_option("--seed", gen.seed, "master seed");
    gen_cmd->add_option("--train", gen.train, "training sample count");
    gen_cmd->add_option("--val", gen.val, "validation sample count");
    gen_cmd->add_option("--out", gen.out, "output directory")->required();

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "warm up the backbone, train prompt + head");
    train_cmd->set_config("--config", "", "key = value config file, overridden by flags");
    train_cmd->add_option("--data", tr.data, "directory from gen-data")->required();
    train_cmd->add_option("--out", tr.out, "output directory")->required();
    train_cmd->add_option("--variant", tr.variant,
                          "plain | token_sim | llm_loss | no_rep_eval | caption_baseline");
    train_cmd->add_option("--epochs", tr.cfg.epochs, "training epochs");
    train_cmd->add_option("--lr-prompt", tr.cfg.lr_prompt, "soft prompt learning rate");
    train_cmd->add_option("--lr-head", tr.cfg.lr_head, "head learning rate");
    train_cmd->add_option("--batch-size", tr.cfg.batch_size, "minibatch size");
    train_cmd->add_option("--seed", tr.cfg.seed, "training seed");
    train_cmd->add_option("--lambda-sim", tr.cfg.weights.lambda_sim, "token similarity weight");
    train_cmd->add_option("--lambda-llm", tr.cfg.weights.lambda_llm, "LLM loss weight");
    train_cmd->add_option("--warmup-epochs", tr.cfg.warmup_epochs, "warm-up epochs");
    train_cmd->add_option("--warmup-lr", tr.cfg.warmup_lr, "warm-up step size");
    train_cmd->add_option("--optimizer", tr.optimizer, "sgd | sgd_momentum");
    train_cmd->add_option("--dim", tr.model.dim, "model width");
    train_cmd->add_option("--enc-blocks", tr.model.enc_blocks, "encoder blocks");
    train_cmd->add_option("--dec-blocks", tr.model.dec_blocks, "decoder blocks");
    train_cmd->add_option("--heads", tr.model.heads, "attention heads");
    train_cmd->add_option("--n-prompt", tr.model.n_prompt, "soft prompt length");
    train_cmd->add_option("--patch", tr.model.patch, "patch size");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate over clean + corruption grid");
    eval_cmd->set_config("--config", "", "key = value config file, overridden by flags");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--data", ev.data, "dataset file (.lbds)")->required();
    eval_cmd->add_option("--vocab", ev.vocab, "vocabulary file (.lbvc)")->required();
    eval_cmd->add_option("--path", ev.path, "soft | hard | no_rep");
    eval_cmd->add_option("--out", ev.out, "optional report directory");
    eval_cmd->add_option("--seed", ev.seed, "corruption seed");

    SampleArgs sm;
    auto* sample_cmd = app.add_subcommand("sample", "print word descriptions per image");
    sample_cmd->set_config("--config", "", "key = value config file, overridden by flags");
    sample_cmd->add_option("--checkpoint", sm.checkpoint, "checkpoint file")->required();
    sample_cmd->add_option("--data", sm.data, "dataset file (.lbds)")->required();
    sample_cmd->add_option("--vocab", sm.vocab, "vocabulary file (.lbvc)")->required();
    sample_cmd->add_option("--path", sm.path, "hard | no_rep");
    sample_cmd->add_option("--count", sm.count, "number of images");

    GradCheckArgs gc;
    auto* gc_cmd = app.add_subcommand("grad-check", "full-pipeline finite-difference check");
    gc_cmd->set_config("--config", "", "key = value config file, overridden by flags");
    gc_cmd->set_help_flag("--help", "print help");  // frees -h/--h for the step size
    gc_cmd->add_option("--h", gc.h, "finite-difference step");
    gc_cmd->add_flag("--sabotage", gc.sabotage, "corrupt one backward rule (negative control)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitArgument;
    }

    try {
        if (gen_cmd->parsed()) return cmd_gen_data(gen);
        if (train_cmd->parsed()) return cmd_train(tr);
        if (eval_cmd->parsed()) return cmd_eval(ev);
        if (sample_cmd->parsed()) return cmd_sample(sm);
        if (gc_cmd->parsed()) return cmd_grad_check(gc);
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const ConfigError& e) {
        std::cerr << "artifact mismatch: " << e.what() << "\n";
        return kExitArtifact;
    } catch (const FormatError& e) {
        std::cerr << "artifact mismatch: " << e.what() << "\n";
        return kExitArtifact;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitArgument;
    }
    return kExitArgument;
}
