#include "nexvitad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nexvitad {

namespace {

struct RankedCounts {
    // per unique score (descending): positives and negatives at that score
    std::vector<real> scores;
    std::vector<long> pos;
    std::vector<long> neg;
    long total_pos = 0;
    long total_neg = 0;
};

RankedCounts rank_counts(const std::vector<real>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw_shape("scores and labels must have equal length");
    if (scores.empty()) throw_config("empty score set");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    RankedCounts rc;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const std::size_t i = order[oi];
        if (labels[i] != 0 && labels[i] != 1) throw_config("labels must be binary");
        if (rc.scores.empty() || scores[i] != rc.scores.back()) {
            rc.scores.push_back(scores[i]);
            rc.pos.push_back(0);
            rc.neg.push_back(0);
        }
        rc.pos.back() += labels[i];
        rc.neg.back() += 1 - labels[i];
        rc.total_pos += labels[i];
        rc.total_neg += 1 - labels[i];
    }
    return rc;
}

real iou(const Tensor& pred, const Tensor& gt) {
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] > 0.5;
        const bool g = gt.data[i] > 0.5;
        inter += (p && g) ? 1 : 0;
        uni += (p || g) ? 1 : 0;
    }
    return uni == 0 ? 0.0 : static_cast<real>(inter) / static_cast<real>(uni);
}

Tensor normalized(const Tensor& map) {
    Tensor out = map;
    real lo = out.data[0], hi = out.data[0];
    for (real v : out.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const real range = hi - lo;
    if (range < 1e-12) {
        out.zero();
        return out;
    }
    for (auto& v : out.data) v = (v - lo) / range;
    return out;
}

} // namespace

real auc(const std::vector<real>& scores, const std::vector<int>& labels) {
    RankedCounts rc = rank_counts(scores, labels);
    if (rc.total_pos == 0 || rc.total_neg == 0) {
        throw_numeric("auc undefined: both classes must be present");
    }
    // rank statistic with ties counted half
    real area = 0.0;
    long tp = 0;
    for (std::size_t g = 0; g < rc.scores.size(); ++g) {
        // negatives at this score tie with positives at this score
        area += static_cast<real>(rc.neg[g]) * (static_cast<real>(tp) + 0.5 * static_cast<real>(rc.pos[g]));
        tp += rc.pos[g];
    }
    // area counts, for each negative, the positives scored above it
    const real pairs = static_cast<real>(rc.total_pos) * static_cast<real>(rc.total_neg);
    return area / pairs;
}

real average_precision(const std::vector<real>& scores, const std::vector<int>& labels) {
    RankedCounts rc = rank_counts(scores, labels);
    if (rc.total_pos == 0) throw_numeric("average precision undefined: no positives");
    real ap = 0.0;
    long tp = 0, fp = 0;
    real recall_prev = 0.0;
    for (std::size_t g = 0; g < rc.scores.size(); ++g) {
        tp += rc.pos[g];
        fp += rc.neg[g];
        const real recall = static_cast<real>(tp) / static_cast<real>(rc.total_pos);
        const real precision = static_cast<real>(tp) / static_cast<real>(tp + fp);
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
    }
    return ap;
}

ProResult pro_mean_iou(const std::vector<Tensor>& score_maps, const std::vector<Tensor>& gt_masks,
                       ProMode mode, real fixed_tau) {
    if (score_maps.size() != gt_masks.size()) throw_shape("score map and mask counts differ");
    std::vector<Tensor> maps;
    std::vector<const Tensor*> masks;
    for (std::size_t i = 0; i < score_maps.size(); ++i) {
        bool any = false;
        for (real v : gt_masks[i].data) any |= v > 0.5;
        if (!any) continue; // IoU undefined at 0/0
        require_same_dims(score_maps[i], gt_masks[i], "score map", "ground truth mask");
        maps.push_back(normalized(score_maps[i]));
        masks.push_back(&gt_masks[i]);
    }
    if (maps.empty()) throw_numeric("pro undefined: no image has a nonempty ground-truth mask");

    auto mean_iou_at = [&](real tau, std::vector<real>* per_image) {
        real sum = 0.0;
        for (std::size_t i = 0; i < maps.size(); ++i) {
            Tensor pred(maps[i].dims);
            for (std::size_t j = 0; j < pred.data.size(); ++j) pred.data[j] = maps[i].data[j] > tau ? 1.0 : 0.0;
            const real v = iou(pred, *masks[i]);
            if (per_image) per_image->push_back(v);
            sum += v;
        }
        return sum / static_cast<real>(maps.size());
    };

    ProResult result;
    if (mode == ProMode::Fixed) {
        result.tau = fixed_tau;
        result.value = mean_iou_at(fixed_tau, &result.per_image);
        return result;
    }
    real best = -1.0, best_tau = 0.0;
    for (int t = 0; t <= 100; ++t) {
        const real tau = static_cast<real>(t) / 100.0;
        const real v = mean_iou_at(tau, nullptr);
        if (v > best) {
            best = v;
            best_tau = tau;
        }
    }
    result.tau = best_tau;
    result.value = mean_iou_at(best_tau, &result.per_image);
    return result;
}

} // namespace nexvitad
