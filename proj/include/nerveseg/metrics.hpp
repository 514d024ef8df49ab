#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nerveseg/tensor.hpp"

namespace nerveseg {

struct BinaryMask {
    int h = 0, w = 0;
    std::vector<uint8_t> bits;  // values in {0,1}

    BinaryMask() = default;
    BinaryMask(int h_, int w_) : h(h_), w(w_), bits(static_cast<size_t>(h_) * w_, 0) {}

    uint8_t& at(int i, int j) { return bits[static_cast<size_t>(i) * w + j]; }
    uint8_t at(int i, int j) const { return bits[static_cast<size_t>(i) * w + j]; }
    size_t count() const;
    bool operator==(const BinaryMask& o) const = default;
};

/// pixel = 1 iff p >= threshold (boundary inclusive). Input is a
/// (1,1,H,W) probability map; values outside [0,1] are an error.
BinaryMask binarize(const Tensor& prob, float threshold = 0.5f);

/// 2|a n b| / (|a| + |b|); 1.0 when both masks are empty (agreement
/// semantics for the 0/0 case).
double dice(const BinaryMask& pred, const BinaryMask& truth);

struct RunDice {
    int subject = 0;
    std::string arch;
    double dice = 0.0;
};

struct DiceRow {
    int subject = 0;
    std::string arch;
    double mean_dice = 0.0;
};

struct DiceReport {
    std::vector<DiceRow> rows;
    std::vector<std::pair<std::string, double>> averages;  // one per arch
};

/// Groups runs by (subject, arch), means each group, then means the row
/// values per arch. Archs keep first-appearance order, subjects ascend.
DiceReport aggregate_report(const std::vector<RunDice>& runs);

/// header `subject,arch,mean_dice`, one row per (subject, arch), then
/// `average,<arch>,<value>` rows. Values render with 4 decimals.
std::string report_to_csv(const DiceReport& report);

}  // namespace nerveseg
