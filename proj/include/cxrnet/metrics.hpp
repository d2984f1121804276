#pragma once

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cxrnet/error.hpp"

namespace cxr {

struct RocPoint {
    double fpr = 0;
    double tpr = 0;
};

struct EvalReport {
    long tp = 0, tn = 0, fp = 0, fn = 0;
    double accuracy = 0, precision = 0, recall = 0, f1 = 0;
    // Set when the metric's denominator was zero and it was reported as 0.
    bool precision_degenerate = false, recall_degenerate = false, f1_degenerate = false;
    std::vector<RocPoint> roc;
    double auc = 0;
    bool auc_defined = false;
    bool has_scores = false;  // false when built from confusion counts alone
    double loss = 0;  // mean BCE over the evaluated set, when scores were available

    long total() const { return tp + tn + fp + fn; }
};

// Accuracy, precision (TP/(TP+FP)), recall (TP/(TP+FN)) and F1 = 2PR/(P+R).
inline EvalReport metrics_from_counts(long tp, long tn, long fp, long fn) {
    require(tp >= 0 && tn >= 0 && fp >= 0 && fn >= 0, ErrorKind::parameter,
            "confusion counts must be non-negative");
    EvalReport r;
    r.tp = tp;
    r.tn = tn;
    r.fp = fp;
    r.fn = fn;
    const long n = r.total();
    r.accuracy = n > 0 ? static_cast<double>(tp + tn) / static_cast<double>(n) : 0.0;
    if (tp + fp > 0) r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    else r.precision_degenerate = true;
    if (tp + fn > 0) r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    else r.recall_degenerate = true;
    if (r.precision + r.recall > 0) r.f1 = 2 * r.precision * r.recall / (r.precision + r.recall);
    else r.f1_degenerate = true;
    return r;
}

struct RocCurve {
    std::vector<RocPoint> points;
    double auc = 0;
};

// Sweeps a threshold down through every distinct score, starting from (0,0)
// and ending at (1,1). Tied scores move both rates at once, so the trapezoid
// over that step contributes exactly half the tie mass.
inline RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
    require(scores.size() == labels.size(), ErrorKind::shape, "roc_auc scores/labels length mismatch");
    long pos = 0, neg = 0;
    for (int l : labels) {
        require(l == 0 || l == 1, ErrorKind::parameter, "roc_auc labels must be 0 or 1");
        (l == 1 ? pos : neg) += 1;
    }
    require(pos > 0 && neg > 0, ErrorKind::undefined_auc,
            "ROC/AUC needs at least one positive and one negative label");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve c;
    c.points.push_back({0.0, 0.0});
    long tp = 0, fp = 0;
    double area2 = 0;  // twice the area in (count x count) units
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = scores[order[i]];
        long dtp = 0, dfp = 0;
        while (i < order.size() && scores[order[i]] == s) {
            (labels[order[i]] == 1 ? dtp : dfp) += 1;
            ++i;
        }
        area2 += static_cast<double>(dfp) * static_cast<double>(2 * tp + dtp);
        tp += dtp;
        fp += dfp;
        c.points.push_back({static_cast<double>(fp) / neg, static_cast<double>(tp) / pos});
    }
    c.auc = area2 / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
    return c;
}

// Confusion counts at the p > 0.5 rule plus ROC/AUC when both classes exist.
inline EvalReport evaluate_scores(std::span<const double> scores, std::span<const int> labels) {
    require(scores.size() == labels.size(), ErrorKind::shape, "scores/labels length mismatch");
    long tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] > 0.5;
        if (labels[i] == 1) (predicted ? tp : fn) += 1;
        else (predicted ? fp : tn) += 1;
    }
    EvalReport r = metrics_from_counts(tp, tn, fp, fn);
    r.has_scores = true;
    if (tp + fn > 0 && tn + fp > 0) {
        auto curve = roc_auc(scores, labels);
        r.roc = std::move(curve.points);
        r.auc = curve.auc;
        r.auc_defined = true;
    }
    return r;
}

inline std::string fmt_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

// Human-readable block; rates as percentages with two decimals.
inline std::string format_report(const EvalReport& r) {
    std::string s;
    s += "samples    " + std::to_string(r.total()) + "\n";
    s += "TP " + std::to_string(r.tp) + "  TN " + std::to_string(r.tn) + "  FP " + std::to_string(r.fp) +
         "  FN " + std::to_string(r.fn) + "\n";
    auto line = [&](const char* name, double v, bool degenerate) {
        s += std::string(name) + fmt_fixed(100.0 * v, 2) + "%" + (degenerate ? "  (undefined: zero denominator)" : "") + "\n";
    };
    line("accuracy   ", r.accuracy, false);
    line("precision  ", r.precision, r.precision_degenerate);
    line("recall     ", r.recall, r.recall_degenerate);
    line("f1         ", r.f1, r.f1_degenerate);
    std::string auc = "n/a (no scores)";
    if (r.auc_defined) auc = fmt_fixed(r.auc, 4);
    else if (r.has_scores) auc = "undefined (single class)";
    s += "auc        " + auc + "\n";
    return s;
}

inline std::string report_key_values(const EvalReport& r) {
    std::string s;
    auto kv = [&](const char* k, const std::string& v) { s += std::string(k) + "=" + v + "\n"; };
    kv("samples", std::to_string(r.total()));
    kv("tp", std::to_string(r.tp));
    kv("tn", std::to_string(r.tn));
    kv("fp", std::to_string(r.fp));
    kv("fn", std::to_string(r.fn));
    kv("accuracy", fmt_fixed(r.accuracy, 8));
    kv("precision", fmt_fixed(r.precision, 8));
    kv("recall", fmt_fixed(r.recall, 8));
    kv("f1", fmt_fixed(r.f1, 8));
    kv("precision_degenerate", r.precision_degenerate ? "true" : "false");
    kv("recall_degenerate", r.recall_degenerate ? "true" : "false");
    kv("f1_degenerate", r.f1_degenerate ? "true" : "false");
    kv("auc", r.auc_defined ? fmt_fixed(r.auc, 8) : "undefined");
    kv("auc_defined", r.auc_defined ? "true" : "false");
    kv("loss", fmt_fixed(r.loss, 8));
    return s;
}

inline std::string roc_points_text(const EvalReport& r) {
    std::string s = "# fpr tpr\n";
    for (const auto& p : r.roc) s += fmt_fixed(p.fpr, 8) + " " + fmt_fixed(p.tpr, 8) + "\n";
    return s;
}

}  // namespace cxr
