#include "nerveseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace nerveseg {

size_t BinaryMask::count() const {
    size_t total = 0;
    for (uint8_t b : bits) total += b;
    return total;
}

BinaryMask binarize(const Tensor& prob, float threshold) {
    if (prob.n != 1 || prob.c != 1)
        throw std::invalid_argument("binarize: expected a (1,1,H,W) probability map, got " +
                                    prob.shape_str());
    BinaryMask mask(prob.h, prob.w);
    for (size_t i = 0; i < prob.size(); ++i) {
        const float p = prob.data[i];
        if (!(p >= 0.0f && p <= 1.0f))
            throw std::invalid_argument("binarize: probability outside [0,1]: " + std::to_string(p));
        mask.bits[i] = p >= threshold ? 1 : 0;
    }
    return mask;
}

double dice(const BinaryMask& pred, const BinaryMask& truth) {
    if (pred.h != truth.h || pred.w != truth.w)
        throw std::invalid_argument("dice: mask dims mismatch");
    size_t inter = 0, total = 0;
    for (size_t i = 0; i < pred.bits.size(); ++i) {
        inter += pred.bits[i] & truth.bits[i];
        total += pred.bits[i] + truth.bits[i];
    }
    if (total == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

DiceReport aggregate_report(const std::vector<RunDice>& runs) {
    if (runs.empty()) throw std::invalid_argument("aggregate_report: no runs");
    std::vector<std::string> archs;
    for (const auto& r : runs)
        if (std::find(archs.begin(), archs.end(), r.arch) == archs.end()) archs.push_back(r.arch);

    DiceReport report;
    for (const auto& arch : archs) {
        std::map<int, std::pair<double, int>> groups;  // subject -> (sum, count)
        for (const auto& r : runs)
            if (r.arch == arch) {
                auto& g = groups[r.subject];
                g.first += r.dice;
                g.second += 1;
            }
        double row_sum = 0.0;
        for (const auto& [subject, g] : groups) {
            const double mean = g.first / g.second;
            report.rows.push_back({subject, arch, mean});
            row_sum += mean;
        }
        report.averages.emplace_back(arch, row_sum / static_cast<double>(groups.size()));
    }
    return report;
}

std::string report_to_csv(const DiceReport& report) {
    std::string out = "subject,arch,mean_dice\n";
    char buf[64];
    for (const auto& row : report.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%s,%.4f\n", row.subject, row.arch.c_str(),
                      row.mean_dice);
        out += buf;
    }
    for (const auto& [arch, avg] : report.averages) {
        std::snprintf(buf, sizeof(buf), "average,%s,%.4f\n", arch.c_str(), avg);
        out += buf;
    }
    return out;
}

}  // namespace nerveseg
