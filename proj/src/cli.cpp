#include "nerveseg/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "nerveseg/data.hpp"
#include "nerveseg/gradsuite.hpp"
#include "nerveseg/parallel.hpp"
#include "nerveseg/trainer.hpp"

namespace nerveseg {

namespace {

std::vector<int> parse_dilations(const std::string& text) {
    std::vector<int> out;
    std::string tok;
    std::istringstream in(text);
    while (std::getline(in, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

Arch parse_arch(const std::string& name) {
    if (name == "unet") return Arch::plain;
    if (name == "dilated") return Arch::dilated;
    throw CLI::ValidationError("--arch", "expected unet or dilated, got " + name);
}

int resolve_jobs(int flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("NERVESEG_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    return 1;
}

const SubjectSet& find_subject(const std::vector<SubjectSet>& subjects, int id) {
    for (const auto& s : subjects)
        if (s.subject_id == id) return s;
    throw std::runtime_error("subject " + std::to_string(id) + " not in dataset");
}

void print_rf_table(const ModelConfig& cfg) {
    std::printf("arch: %s\n", arch_name(cfg.arch));
    std::printf("%-24s %6s %6s %12s\n", "layer", "rf", "jump", "extent");
    for (const auto& row : receptive_field_table(cfg))
        std::printf("%-24s %6lld %6lld %7dx%d\n", row.layer.c_str(), row.rf, row.jump, row.out_h,
                    row.out_w);
    std::printf("innermost receptive field: %lld\n", innermost_receptive_field(cfg));
    std::printf("covers input: %s\n", receptive_field_covers_input(cfg) ? "yes" : "no");
}

struct CommonTrainFlags {
    std::string data;
    int epochs = 40, patience = 5, batch = 8, base_channels = 16;
    double lr = 1e-3;
    uint64_t seed = 0;
    std::string dilations = "2,4";
    std::string upsample = "transposed";
    int jobs = 0;

    void add_to(CLI::App* cmd, bool data_required = true) {
        auto* d = cmd->add_option("--data", data, "dataset root directory");
        if (data_required) d->required();
        cmd->add_option("--epochs", epochs, "epoch cap");
        cmd->add_option("--patience", patience, "early-stopping patience");
        cmd->add_option("--lr", lr, "Adam learning rate");
        cmd->add_option("--batch", batch, "batch size");
        cmd->add_option("--seed", seed, "run seed");
        cmd->add_option("--base-channels", base_channels, "channels of the first level");
        cmd->add_option("--dilations", dilations, "comma list for the dilated arch");
        cmd->add_option("--upsample", upsample, "transposed|bilinear")
            ->check(CLI::IsMember({"transposed", "bilinear"}));
        cmd->add_option("--jobs", jobs, "worker threads (or NERVESEG_THREADS)");
    }

    TrainConfig to_config() const {
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.patience = patience;
        cfg.batch_size = batch;
        cfg.lr = lr;
        cfg.seed = seed;
        cfg.model.base_channels = base_channels;
        cfg.model.dilations = parse_dilations(dilations);
        cfg.model.upsample =
            upsample == "bilinear" ? UpsampleMode::bilinear : UpsampleMode::transposed;
        return cfg;
    }
};

int cmd_train(const CommonTrainFlags& flags, const std::string& arch, int test_subject,
              int val_subject, const std::string& out_path, const std::string& history_path,
              bool no_augment) {
    set_num_threads(resolve_jobs(flags.jobs));
    TrainConfig cfg = flags.to_config();
    cfg.model.arch = parse_arch(arch);
    cfg.augment.enabled = !no_augment;
    cfg.validate();

    const auto subjects = load_dataset(flags.data);
    std::vector<Sample> train;
    for (const auto& s : subjects) {
        if (s.subject_id == test_subject || s.subject_id == val_subject) continue;
        train.insert(train.end(), s.samples.begin(), s.samples.end());
    }
    if (train.empty()) throw std::runtime_error("train: no training subjects left");
    const auto& val = find_subject(subjects, val_subject);

    auto [ck, history] = train_run(train, val.samples, cfg);
    for (size_t e = 0; e < history.epochs.size(); ++e)
        std::printf("epoch %zu train_loss %.6f val_dice %.4f\n", e + 1,
                    history.epochs[e].train_loss, history.epochs[e].val_dice);
    std::printf("best epoch %d val_dice %.4f\n", history.best_epoch + 1,
                history.epochs[history.best_epoch].val_dice);

    save_checkpoint(ck, out_path);
    std::printf("checkpoint written to %s\n", out_path.c_str());
    if (!history_path.empty()) write_history_jsonl(history, history_path);

    const double test_dice = evaluate_subject(ck, find_subject(subjects, test_subject));
    std::printf("test subject %d dice %.4f\n", test_subject, test_dice);
    return 0;
}

int cmd_cv(const CommonTrainFlags& flags, const std::string& arch, const std::string& report_path,
           const std::string& histories_dir) {
    TrainConfig cfg = flags.to_config();
    cfg.validate();
    std::vector<Arch> archs;
    if (arch == "both")
        archs = {Arch::plain, Arch::dilated};
    else
        archs = {parse_arch(arch)};

    const int jobs = resolve_jobs(flags.jobs);
    set_num_threads(1);  // fold workers own the parallelism

    const auto subjects = load_dataset(flags.data);
    const CvResult result = run_nested_cv(subjects, cfg, archs, jobs);

    for (const auto& fold : result.folds)
        std::printf("arch=%s test=%d val=%d epochs=%zu dice=%.4f\n", fold.arch.c_str(), fold.test,
                    fold.val, fold.history.epochs.size(), fold.test_dice);

    const std::string csv = report_to_csv(result.report);
    std::ofstream out(report_path);
    if (!out) throw std::runtime_error("cannot write " + report_path);
    out << csv;
    out.close();
    std::printf("report written to %s\n", report_path.c_str());

    if (!histories_dir.empty()) {
        std::filesystem::create_directories(histories_dir);
        int i = 0;
        for (const auto& fold : result.folds) {
            char name[64];
            std::snprintf(name, sizeof(name), "fold_%03d_%s_test%d_val%d.jsonl", i++,
                          fold.arch.c_str(), fold.test, fold.val);
            write_history_jsonl(fold.history, (std::filesystem::path(histories_dir) / name).string());
        }
    }
    return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& input, const std::string& out_path,
                const std::string& prob_path, int jobs) {
    set_num_threads(resolve_jobs(jobs));
    const Checkpoint ck = load_checkpoint(ckpt);
    Model model;
    model.config = ck.config;
    model.param_order = ck.order;
    model.params = ck.params;

    const GrayImage raw = read_pgm(input);
    Tensor image(1, 1, raw.h, raw.w);
    for (size_t i = 0; i < raw.pixels.size(); ++i)
        image.data[i] = static_cast<float>(raw.pixels[i]) / 255.0f;
    image = resize_bilinear(image, ck.config.input_h, ck.config.input_w);

    Graph g;
    const auto res = model.forward(g, image, /*trainable=*/false);
    const VarId prob_id = g.sigmoid(res.main_logits);
    const Tensor& prob = g.value(prob_id);

    GrayImage mask_img{prob.w, prob.h, std::vector<uint8_t>(prob.size())};
    for (size_t i = 0; i < prob.size(); ++i) mask_img.pixels[i] = prob.data[i] >= 0.5f ? 255 : 0;
    write_pgm(out_path, mask_img);
    std::printf("mask written to %s\n", out_path.c_str());

    if (!prob_path.empty()) {
        GrayImage prob_img{prob.w, prob.h, std::vector<uint8_t>(prob.size())};
        for (size_t i = 0; i < prob.size(); ++i)
            prob_img.pixels[i] =
                static_cast<uint8_t>(std::floor(255.0f * prob.data[i] + 0.5f));  // round half up
        write_pgm(prob_path, prob_img);
        std::printf("probabilities written to %s\n", prob_path.c_str());
    }
    return 0;
}

int cmd_gradcheck() {
    const auto results = run_gradient_suite();
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("[%s] %-24s max_rel_err %.3e (tol %.0e, %ld checked, %ld skipped)\n",
                    r.pass ? "PASS" : "FAIL", r.name.c_str(), r.max_rel_err, r.tolerance,
                    r.checked, r.skipped);
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 3;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"U-Net / dilated U-Net ultrasound segmentation workbench"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "train one fold and write a checkpoint");
    CommonTrainFlags train_flags;
    train_flags.add_to(train);
    std::string train_arch, train_out, train_history;
    int test_subject = 0, val_subject = 0;
    bool no_augment = false;
    train->add_option("--arch", train_arch, "unet|dilated")
        ->required()
        ->check(CLI::IsMember({"unet", "dilated"}));
    train->add_option("--test-subject", test_subject, "held-out test subject")->required();
    train->add_option("--val-subject", val_subject, "validation subject")->required();
    train->add_option("--out", train_out, "checkpoint path")->required();
    train->add_option("--history", train_history, "epoch history JSONL path");
    train->add_flag("--no-augment", no_augment, "disable training augmentation");

    // cv
    auto* cv = app.add_subcommand("cv", "full nested cross-validation with a CSV report");
    CommonTrainFlags cv_flags;
    cv_flags.add_to(cv);
    std::string cv_arch = "both", cv_report, cv_histories;
    cv->add_option("--arch", cv_arch, "unet|dilated|both")
        ->check(CLI::IsMember({"unet", "dilated", "both"}));
    cv->add_option("--report", cv_report, "output CSV path")->required();
    cv->add_option("--histories", cv_histories, "directory for per-fold history JSONL");

    // predict
    auto* predict = app.add_subcommand("predict", "segment one image with a checkpoint");
    std::string pr_ckpt, pr_input, pr_out, pr_prob;
    int pr_jobs = 0;
    predict->add_option("--ckpt", pr_ckpt, "checkpoint path")->required();
    predict->add_option("--input", pr_input, "input PGM image")->required();
    predict->add_option("--out", pr_out, "output mask PGM (0/255)")->required();
    predict->add_option("--prob", pr_prob, "optional probability map PGM");
    predict->add_option("--jobs", pr_jobs, "worker threads");

    // eval
    auto* eval = app.add_subcommand("eval", "mean dice of a checkpoint on one subject");
    std::string ev_ckpt, ev_data;
    int ev_subject = 0, ev_jobs = 0;
    eval->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    eval->add_option("--data", ev_data, "dataset root")->required();
    eval->add_option("--subject", ev_subject, "subject id")->required();
    eval->add_option("--jobs", ev_jobs, "worker threads");

    // rf
    auto* rf = app.add_subcommand("rf", "receptive-field table of an architecture");
    std::string rf_arch = "unet", rf_dilations = "2,4";
    int rf_depth = 3, rf_input = 128, rf_convs = 2;
    rf->add_option("--arch", rf_arch, "unet|dilated")
        ->check(CLI::IsMember({"unet", "dilated"}));
    rf->add_option("--depth", rf_depth, "pool count");
    rf->add_option("--dilations", rf_dilations, "comma list for the dilated arch");
    rf->add_option("--input", rf_input, "input extent");
    rf->add_option("--convs", rf_convs, "convs per level");

    // phantom
    auto* phantom = app.add_subcommand("phantom", "generate a synthetic phantom dataset");
    std::string ph_out;
    int ph_subjects = 6, ph_per_subject = 10;
    uint64_t ph_seed = 0;
    phantom->add_option("--out", ph_out, "output dataset root")->required();
    phantom->add_option("--subjects", ph_subjects, "subject count");
    phantom->add_option("--per-subject", ph_per_subject, "frames per subject");
    phantom->add_option("--seed", ph_seed, "generator seed");

    // gradcheck
    app.add_subcommand("gradcheck", "finite-difference check of every op and a full net");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (train->parsed())
            return cmd_train(train_flags, train_arch, test_subject, val_subject, train_out,
                             train_history, no_augment);
        if (cv->parsed()) return cmd_cv(cv_flags, cv_arch, cv_report, cv_histories);
        if (predict->parsed()) return cmd_predict(pr_ckpt, pr_input, pr_out, pr_prob, pr_jobs);
        if (eval->parsed()) {
            set_num_threads(resolve_jobs(ev_jobs));
            const Checkpoint ck = load_checkpoint(ev_ckpt);
            const auto subjects = load_dataset(ev_data);
            std::printf("%.4f\n", evaluate_subject(ck, find_subject(subjects, ev_subject)));
            return 0;
        }
        if (rf->parsed()) {
            ModelConfig cfg;
            cfg.arch = parse_arch(rf_arch);
            cfg.depth = rf_depth;
            cfg.convs_per_level = rf_convs;
            cfg.dilations = parse_dilations(rf_dilations);
            cfg.input_h = cfg.input_w = rf_input;
            print_rf_table(cfg);
            return 0;
        }
        if (phantom->parsed()) {
            Rng rng(ph_seed);
            const auto subjects = gen_phantom_subjects(ph_subjects, ph_per_subject, rng);
            export_subjects(subjects, ph_out);
            std::printf("wrote %d subjects x %d frames under %s\n", ph_subjects, ph_per_subject,
                        ph_out.c_str());
            return 0;
        }
        if (app.get_subcommand("gradcheck")->parsed()) return cmd_gradcheck();
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}

}  // namespace nerveseg
