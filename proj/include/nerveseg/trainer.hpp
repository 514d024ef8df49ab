#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "nerveseg/data.hpp"
#include "nerveseg/metrics.hpp"
#include "nerveseg/model.hpp"

namespace nerveseg {

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};
class BadMagicError : public CheckpointError {
  public:
    using CheckpointError::CheckpointError;
};
class VersionError : public CheckpointError {
  public:
    using CheckpointError::CheckpointError;
};
class TruncatedError : public CheckpointError {
  public:
    using CheckpointError::CheckpointError;
};

struct TrainConfig {
    int epochs = 40;
    int patience = 5;
    int batch_size = 8;
    double lr = 1e-3;
    uint64_t seed = 0;
    AugmentConfig augment;
    ModelConfig model;
    bool deterministic = true;

    void validate() const {
        if (epochs < 1 || patience < 1 || batch_size < 1)
            throw std::invalid_argument("train config: epochs, patience and batch_size must be >= 1");
        if (lr <= 0) throw std::invalid_argument("train config: lr must be > 0");
        augment.validate();
        model.validate();
    }
};

struct EpochStats {
    double train_loss = 0.0;
    double val_dice = 0.0;
};

struct RunHistory {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;  // 0-based index into epochs
};

struct Checkpoint {
    ModelConfig config;
    std::vector<std::string> order;
    std::unordered_map<std::string, Tensor> params;
};

/// Improvement means strictly greater by more than 1e-6; training stops
/// once `patience` consecutive epochs fail to improve.
class EarlyStopper {
  public:
    explicit EarlyStopper(int patience) : patience_(patience) {}

    /// Feeds one epoch's metric; true means stop after this epoch.
    bool observe(double metric) {
        const int index = seen_++;
        if (metric > best_ + 1e-6) {
            best_ = metric;
            best_index_ = index;
            improved_ = true;
            return false;
        }
        improved_ = false;
        return index - best_index_ >= patience_;
    }

    bool improved_last() const { return improved_; }
    int best_index() const { return best_index_; }
    double best() const { return best_; }

  private:
    int patience_;
    int seen_ = 0;
    double best_ = -1e300;
    int best_index_ = -1;
    bool improved_ = false;
};

/// One training run: seeded shuffling, on-the-fly augmentation of the
/// training stream only, BCE on the main logits plus one BCE per
/// deep-supervision head, Adam steps per batch, epoch-end validation
/// dice, early stopping, best-epoch weights returned.
std::pair<Checkpoint, RunHistory> train_run(const std::vector<Sample>& train,
                                            const std::vector<Sample>& val,
                                            const TrainConfig& cfg);

/// Mean per-image dice of the checkpointed model over a subject, 0.5
/// threshold, no augmentation.
double evaluate_subject(const Checkpoint& ck, const SubjectSet& subject);

double evaluate_samples(const Checkpoint& ck, const std::vector<Sample>& samples);

struct FoldRecord {
    std::string arch;
    int test = 0, val = 0;
    double test_dice = 0.0;
    RunHistory history;
};

struct CvResult {
    DiceReport report;
    std::vector<FoldRecord> folds;
};

/// Runs every fold of nested_cv_plan for each architecture. Per-fold seed
/// = mix(mix(base seed, arch index), fold index), so folds are independent
/// but reproducible, and the fold set may run on `jobs` worker threads
/// without changing any output.
CvResult run_nested_cv(const std::vector<SubjectSet>& subjects, const TrainConfig& base,
                       const std::vector<Arch>& archs, int jobs = 1);

// ---- checkpoint serialization ------------------------------------------------
//
// Binary layout, little-endian:
//   magic "NSCK", u32 version (=1),
//   u32 config length, config as UTF-8 key=value lines,
//   u32 tensor count, then per tensor:
//     u16 name length, name, u8 rank (=4), 4x u32 dims, f32 payload.

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string config_to_text(const ModelConfig& cfg);
ModelConfig config_from_text(const std::string& text);

/// One JSON object per epoch: {"epoch":k,"train_loss":...,"val_dice":...}.
void write_history_jsonl(const RunHistory& history, const std::string& path);

/// Nearest-neighbor downsample of a mask by 2^levels (top-left rule),
/// as the float target tensor for a deep-supervision head.
Tensor downsample_mask_target(const BinaryMask& mask, int levels);

}  // namespace nerveseg
