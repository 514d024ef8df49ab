#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nerveseg/metrics.hpp"
#include "nerveseg/tensor.hpp"

namespace nerveseg {

class DatasetError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// One grayscale frame with its annotation, both 128x128. Image values
/// live in [0,1]; the mask is strictly binary.
struct Sample {
    Tensor image;  // (1,1,128,128)
    BinaryMask mask;
    std::string source_id;
};

struct SubjectSet {
    int subject_id = 0;
    std::vector<Sample> samples;
};

struct AugmentConfig {
    double max_rotation_deg = 15.0;
    double max_shift_frac = 0.1;
    bool enabled = true;

    void validate() const {
        if (max_rotation_deg < 0) throw std::invalid_argument("augment: max_rotation_deg < 0");
        if (max_shift_frac < 0 || max_shift_frac >= 1)
            throw std::invalid_argument("augment: max_shift_frac outside [0,1)");
    }
};

struct Fold {
    std::vector<int> train;
    int val = 0;
    int test = 0;
};

struct SplitPlan {
    std::vector<Fold> folds;
};

// ---- 8-bit binary PGM (P5) ------------------------------------------------

struct GrayImage {
    int w = 0, h = 0;
    std::vector<uint8_t> pixels;
};

GrayImage read_pgm(const std::string& path);
void write_pgm(const std::string& path, const GrayImage& img);

// ---- loading & resizing ----------------------------------------------------

/// Half-pixel-center bilinear resample to (out_h, out_w), edge-clamped.
Tensor resize_bilinear(const Tensor& src, int out_h, int out_w);
BinaryMask resize_nearest(const BinaryMask& src, int out_h, int out_w);

/// Scans root/subject_<k>/images/*.pgm with masks of the same filename
/// under masks/. Frames are brought to 128x128 (bilinear image, nearest
/// mask); mask pixels > 127 become 1.
std::vector<SubjectSet> load_dataset(const std::string& root);

/// Writes the same directory layout load_dataset reads, so generated data
/// round-trips through the normal path.
void export_subjects(const std::vector<SubjectSet>& subjects, const std::string& root);

// ---- augmentation ------------------------------------------------------------

/// Rotation about the image center by `deg` then a (dx, dy) pixel shift,
/// applied by inverse mapping: bilinear for the image, nearest for the
/// mask, zero fill outside.
Sample warp_sample(const Sample& s, double deg, double dx, double dy);

/// Draws rotation ~ U(-max_rotation_deg, +max_rotation_deg), then
/// dx ~ U(-f, f)*W, then dy ~ U(-f, f)*H, and warps. Disabled config
/// returns the sample unchanged.
Sample augment_sample(const Sample& s, const AugmentConfig& cfg, Rng& rng);

/// Number of augment_sample invocations so far; lets tests pin down that
/// evaluation paths never augment.
long augment_call_count();

// ---- split planning ------------------------------------------------------------

/// One fold per ordered (test, val) pair of distinct subjects; the rest
/// train. n subjects give n*(n-1) folds.
SplitPlan nested_cv_plan(std::vector<int> subject_ids);

// ---- synthetic phantoms ---------------------------------------------------------

/// Speckled ultrasound-like frames: a smooth bright background, one dark
/// elliptical cluster (the mask), and 1-2 dark distractor regions outside
/// the mask. Masks hold 1-25% of the pixels by construction.
std::vector<SubjectSet> gen_phantom_subjects(int count, int per_subject, Rng& rng);

}  // namespace nerveseg
