#include "nerveseg/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "nerveseg/autograd.hpp"
#include "nerveseg/optim.hpp"

namespace nerveseg {

// ---- helpers -----------------------------------------------------------------

Tensor downsample_mask_target(const BinaryMask& mask, int levels) {
    const int f = 1 << levels;
    Tensor t(1, 1, mask.h / f, mask.w / f);
    for (int i = 0; i < t.h; ++i)
        for (int j = 0; j < t.w; ++j) t.at(0, 0, i, j) = static_cast<float>(mask.at(i * f, j * f));
    return t;
}

namespace {

Tensor batch_images(const std::vector<Sample>& samples, const std::vector<int>& idx, size_t lo,
                    size_t hi) {
    const Sample& first = samples[idx[lo]];
    Tensor batch(static_cast<int>(hi - lo), 1, first.image.h, first.image.w);
    for (size_t s = lo; s < hi; ++s) {
        const Tensor& img = samples[idx[s]].image;
        std::copy(img.data.begin(), img.data.end(),
                  batch.data.begin() + static_cast<long>((s - lo) * img.size()));
    }
    return batch;
}

Tensor batch_mask_targets(const std::vector<Sample>& samples, const std::vector<int>& idx,
                          size_t lo, size_t hi, int levels) {
    const int f = 1 << levels;
    const Sample& first = samples[idx[lo]];
    Tensor t(static_cast<int>(hi - lo), 1, first.mask.h / f, first.mask.w / f);
    for (size_t s = lo; s < hi; ++s) {
        const BinaryMask& m = samples[idx[s]].mask;
        float* dst = t.plane(static_cast<int>(s - lo), 0);
        for (int i = 0; i < t.h; ++i)
            for (int j = 0; j < t.w; ++j) dst[i * t.w + j] = static_cast<float>(m.at(i * f, j * f));
    }
    return t;
}

/// Mean per-image dice of `model` over samples (no augmentation anywhere
/// on this path).
double mean_dice(const Model& model, const std::vector<Sample>& samples, int batch_size) {
    double acc = 0.0;
    std::vector<int> idx(samples.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (size_t lo = 0; lo < samples.size(); lo += static_cast<size_t>(batch_size)) {
        const size_t hi = std::min(samples.size(), lo + static_cast<size_t>(batch_size));
        Graph g;
        const auto res = model.forward(g, batch_images(samples, idx, lo, hi), /*trainable=*/false);
        const Tensor& logits = g.value(res.main_logits);
        for (size_t s = lo; s < hi; ++s) {
            Tensor prob(1, 1, logits.h, logits.w);
            const float* src = logits.plane(static_cast<int>(s - lo), 0);
            for (int i = 0; i < logits.h * logits.w; ++i) {
                const float z = src[i];
                prob.data[i] = z >= 0 ? 1.0f / (1.0f + std::exp(-z))
                                      : std::exp(z) / (1.0f + std::exp(z));
            }
            acc += dice(binarize(prob), samples[s].mask);
        }
    }
    return acc / static_cast<double>(samples.size());
}

}  // namespace

// ---- training ------------------------------------------------------------------

std::pair<Checkpoint, RunHistory> train_run(const std::vector<Sample>& train,
                                            const std::vector<Sample>& val,
                                            const TrainConfig& cfg) {
    cfg.validate();
    if (train.empty() || val.empty())
        throw std::invalid_argument("train_run: train and val sets must be non-empty");

    Model model = build_model<float>(cfg.model, cfg.seed);
    AdamState opt = adam_init(model.param_order, model.params, cfg.lr);
    Rng rng(Rng::mix(cfg.seed, 0x7261696e));  // shuffle + augmentation stream

    RunHistory history;
    EarlyStopper stopper(cfg.patience);
    std::unordered_map<std::string, Tensor> best_params = model.params;

    std::vector<int> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with the run's stream.
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(rng.next_int(0, static_cast<int>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }

        std::vector<Sample> epoch_samples;
        epoch_samples.reserve(train.size());
        for (int id : order)
            epoch_samples.push_back(cfg.augment.enabled ? augment_sample(train[id], cfg.augment, rng)
                                                        : train[id]);
        std::vector<int> seq(epoch_samples.size());
        for (size_t i = 0; i < seq.size(); ++i) seq[i] = static_cast<int>(i);

        double loss_sum = 0.0;
        for (size_t lo = 0; lo < epoch_samples.size(); lo += static_cast<size_t>(cfg.batch_size)) {
            const size_t hi =
                std::min(epoch_samples.size(), lo + static_cast<size_t>(cfg.batch_size));
            Graph g;
            const auto res = model.forward(g, batch_images(epoch_samples, seq, lo, hi), true);
            VarId loss = g.bce_loss(res.main_logits, batch_mask_targets(epoch_samples, seq, lo, hi, 0));
            for (size_t a = 0; a < res.aux_logits.size(); ++a)
                loss = g.residual_add(
                    loss, g.bce_loss(res.aux_logits[a],
                                     batch_mask_targets(epoch_samples, seq, lo, hi,
                                                        static_cast<int>(a) + 1)));
            const double loss_value = g.value(loss).data[0];
            if (!std::isfinite(loss_value)) throw DivergenceError("train_run: non-finite loss");
            loss_sum += loss_value * static_cast<double>(hi - lo);

            g.backward(loss);
            std::unordered_map<std::string, Tensor> grads;
            grads.reserve(res.param_vars.size());
            for (const auto& [name, id] : res.param_vars) grads.emplace(name, g.grad(id));
            adam_step(model.param_order, model.params, grads, opt);
        }

        EpochStats stats;
        stats.train_loss = loss_sum / static_cast<double>(epoch_samples.size());
        stats.val_dice = mean_dice(model, val, cfg.batch_size);
        history.epochs.push_back(stats);

        const bool stop = stopper.observe(stats.val_dice);
        if (stopper.improved_last()) best_params = model.params;
        if (stop) break;
    }
    history.best_epoch = stopper.best_index();

    Checkpoint ck;
    ck.config = cfg.model;
    ck.order = model.param_order;
    ck.params = std::move(best_params);
    return {std::move(ck), std::move(history)};
}

double evaluate_samples(const Checkpoint& ck, const std::vector<Sample>& samples) {
    if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
    Model model;
    model.config = ck.config;
    model.param_order = ck.order;
    model.params = ck.params;
    return mean_dice(model, samples, 8);
}

double evaluate_subject(const Checkpoint& ck, const SubjectSet& subject) {
    return evaluate_samples(ck, subject.samples);
}

// ---- nested cross-validation ------------------------------------------------------

CvResult run_nested_cv(const std::vector<SubjectSet>& subjects, const TrainConfig& base,
                       const std::vector<Arch>& archs, int jobs) {
    base.validate();
    std::vector<int> ids;
    for (const auto& s : subjects) ids.push_back(s.subject_id);
    const SplitPlan plan = nested_cv_plan(ids);

    auto subject_by_id = [&](int id) -> const SubjectSet& {
        for (const auto& s : subjects)
            if (s.subject_id == id) return s;
        throw std::logic_error("unknown subject id");
    };

    struct Task {
        size_t arch_index, fold_index;
    };
    std::vector<Task> tasks;
    for (size_t a = 0; a < archs.size(); ++a)
        for (size_t f = 0; f < plan.folds.size(); ++f) tasks.push_back({a, f});

    std::vector<FoldRecord> records(tasks.size());
    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const size_t t = next.fetch_add(1);
            if (t >= tasks.size()) return;
            const Task& task = tasks[t];
            const Fold& fold = plan.folds[task.fold_index];

            TrainConfig cfg = base;
            cfg.model.arch = archs[task.arch_index];
            cfg.seed = Rng::mix(Rng::mix(base.seed, task.arch_index), task.fold_index);

            std::vector<Sample> train;
            for (int id : fold.train) {
                const auto& subj = subject_by_id(id);
                train.insert(train.end(), subj.samples.begin(), subj.samples.end());
            }
            auto [ck, history] = train_run(train, subject_by_id(fold.val).samples, cfg);

            FoldRecord rec;
            rec.arch = arch_name(archs[task.arch_index]);
            rec.test = fold.test;
            rec.val = fold.val;
            rec.test_dice = evaluate_subject(ck, subject_by_id(fold.test));
            rec.history = std::move(history);
            records[t] = std::move(rec);
        }
    };

    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < jobs; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    std::vector<RunDice> runs;
    runs.reserve(records.size());
    for (const auto& rec : records) runs.push_back({rec.test, rec.arch, rec.test_dice});

    CvResult result;
    result.report = aggregate_report(runs);
    result.folds = std::move(records);
    return result;
}

// ---- checkpoint serialization ---------------------------------------------------

namespace {

void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n, const char* what) {
        if (pos + n > buf.size())
            throw TruncatedError(std::string("checkpoint: truncated ") + what);
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<uint8_t>(buf[pos++]);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

std::string config_to_text(const ModelConfig& cfg) {
    std::string dil;
    for (size_t i = 0; i < cfg.dilations.size(); ++i) {
        if (i) dil += ",";
        dil += std::to_string(cfg.dilations[i]);
    }
    std::ostringstream out;
    out << "arch=" << arch_name(cfg.arch) << "\n"
        << "depth=" << cfg.depth << "\n"
        << "convs_per_level=" << cfg.convs_per_level << "\n"
        << "base_channels=" << cfg.base_channels << "\n"
        << "residual_blocks=" << (cfg.residual_blocks ? 1 : 0) << "\n"
        << "deep_supervision=" << (cfg.deep_supervision ? 1 : 0) << "\n"
        << "upsample=" << (cfg.upsample == UpsampleMode::transposed ? "transposed" : "bilinear")
        << "\n"
        << "dilations=" << dil << "\n"
        << "input_h=" << cfg.input_h << "\n"
        << "input_w=" << cfg.input_w << "\n";
    return out.str();
}

ModelConfig config_from_text(const std::string& text) {
    ModelConfig cfg;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw CheckpointError("checkpoint: bad config line: " + line);
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "arch") {
            if (value == "unet") cfg.arch = Arch::plain;
            else if (value == "dilated") cfg.arch = Arch::dilated;
            else throw CheckpointError("checkpoint: unknown arch " + value);
        } else if (key == "depth") cfg.depth = std::stoi(value);
        else if (key == "convs_per_level") cfg.convs_per_level = std::stoi(value);
        else if (key == "base_channels") cfg.base_channels = std::stoi(value);
        else if (key == "residual_blocks") cfg.residual_blocks = value == "1";
        else if (key == "deep_supervision") cfg.deep_supervision = value == "1";
        else if (key == "upsample") {
            if (value == "transposed") cfg.upsample = UpsampleMode::transposed;
            else if (value == "bilinear") cfg.upsample = UpsampleMode::bilinear;
            else throw CheckpointError("checkpoint: unknown upsample mode " + value);
        } else if (key == "dilations") {
            cfg.dilations.clear();
            std::istringstream ds(value);
            std::string tok;
            while (std::getline(ds, tok, ','))
                if (!tok.empty()) cfg.dilations.push_back(std::stoi(tok));
        } else if (key == "input_h") cfg.input_h = std::stoi(value);
        else if (key == "input_w") cfg.input_w = std::stoi(value);
        else throw CheckpointError("checkpoint: unknown config key " + key);
    }
    return cfg;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::string out = "NSCK";
    put_u32(out, 1);
    const std::string cfg = config_to_text(ck.config);
    put_u32(out, static_cast<uint32_t>(cfg.size()));
    out += cfg;
    put_u32(out, static_cast<uint32_t>(ck.order.size()));
    for (const auto& name : ck.order) {
        const Tensor& t = ck.params.at(name);
        put_u16(out, static_cast<uint16_t>(name.size()));
        out += name;
        out.push_back(4);  // rank
        put_u32(out, static_cast<uint32_t>(t.n));
        put_u32(out, static_cast<uint32_t>(t.c));
        put_u32(out, static_cast<uint32_t>(t.h));
        put_u32(out, static_cast<uint32_t>(t.w));
        for (float v : t.data) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(out, bits);
        }
    }
    std::ofstream file(path, std::ios::binary);
    if (!file) throw CheckpointError("checkpoint: cannot write " + path);
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw CheckpointError("checkpoint: failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw CheckpointError("checkpoint: cannot open " + path);
    std::ostringstream ss;
    ss << file.rdbuf();
    const std::string buf = ss.str();

    Reader r{buf};
    if (buf.size() < 4 || buf.compare(0, 4, "NSCK") != 0)
        throw BadMagicError("checkpoint: bad magic");
    r.pos = 4;
    const uint32_t version = r.u32("version");
    if (version != 1)
        throw VersionError("checkpoint: unsupported version " + std::to_string(version));

    Checkpoint ck;
    const uint32_t cfg_len = r.u32("config length");
    ck.config = config_from_text(r.bytes(cfg_len, "config"));
    const uint32_t count = r.u32("tensor count");
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = r.u16("tensor name length");
        const std::string name = r.bytes(name_len, "tensor name");
        const uint8_t rank = r.u8("tensor rank");
        if (rank != 4) throw CheckpointError("checkpoint: unsupported rank for " + name);
        int dims[4];
        for (int d = 0; d < 4; ++d) dims[d] = static_cast<int>(r.u32("tensor dims"));
        Tensor t(dims[0], dims[1], dims[2], dims[3]);
        for (auto& v : t.data) {
            const uint32_t bits = r.u32("tensor payload");
            std::memcpy(&v, &bits, 4);
        }
        ck.order.push_back(name);
        ck.params.emplace(name, std::move(t));
    }
    if (r.pos != buf.size()) throw CheckpointError("checkpoint: trailing bytes");
    return ck;
}

void write_history_jsonl(const RunHistory& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    char buf[160];
    for (size_t e = 0; e < history.epochs.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "{\"epoch\":%zu,\"train_loss\":%.10g,\"val_dice\":%.10g}\n",
                      e + 1, history.epochs[e].train_loss, history.epochs[e].val_dice);
        out << buf;
    }
}

}  // namespace nerveseg
