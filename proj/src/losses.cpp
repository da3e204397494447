#include "anglekit/losses.hpp"

#include <cmath>

#include "anglekit/common.hpp"

namespace anglekit::losses {

namespace {

constexpr double kClampEps = 1e-7;

void check_same_shape(const torch::Tensor& pred, const torch::Tensor& target) {
    if (!pred.sizes().equals(target.sizes()))
        throw ValidationError("loss inputs must share one shape");
    if (pred.numel() == 0) throw ValidationError("loss inputs are empty");
}

}  // namespace

torch::Tensor focal_loss(const torch::Tensor& pred, const torch::Tensor& target,
                         const FocalParams& p) {
    check_same_shape(pred, target);
    auto yp = pred.clamp(kClampEps, 1.0 - kClampEps);
    auto yt = target * yp + (1.0 - target) * (1.0 - yp);
    auto alpha = p.class_balanced
                     ? (target * p.alpha + (1.0 - target) * (1.0 - p.alpha))
                     : torch::full_like(yt, p.alpha);
    return (-alpha * (1.0 - yt).pow(p.gamma) * yt.log()).mean();
}

torch::Tensor fbeta_loss(const torch::Tensor& pred, const torch::Tensor& target,
                         const FBetaParams& p) {
    check_same_shape(pred, target);
    auto tp = (target * pred).sum();
    auto fp = ((1.0 - target) * pred).sum();
    auto fn = (target * (1.0 - pred)).sum();
    const double coef = p.conventional ? 1.0 + p.beta * p.beta : 1.0 + p.beta;
    return 1.0 - (coef * tp + p.eps) / (coef * tp + p.beta * p.beta * fn + fp + p.eps);
}

torch::Tensor hybrid_loss(const torch::Tensor& pred, const torch::Tensor& target,
                          const HybridParams& hp, const FocalParams& fp, const FBetaParams& bp) {
    return hp.rho1 * focal_loss(pred, target, fp) + hp.rho2 * fbeta_loss(pred, target, bp);
}

torch::Tensor kr_loss(const torch::Tensor& pred, const torch::Tensor& target, const KRParams& p) {
    check_same_shape(pred, target);
    auto mse = (target - pred).pow(2).mean();
    auto overlap = 1.0 - 2.0 * (target * pred).sum() / (target.sum() + pred.sum() + p.eps);
    return p.rho3 * mse + p.rho4 * overlap;
}

GradCheckReport grad_check(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& fn,
                           std::vector<torch::Tensor> inputs, double tol) {
    constexpr double h = 1e-5;

    std::vector<torch::Tensor> leaves;
    leaves.reserve(inputs.size());
    for (auto& t : inputs) {
        if (t.numel() > 64) throw ValidationError("grad_check expects tensors of <= 64 elements");
        leaves.push_back(t.detach().to(torch::kDouble).clone().set_requires_grad(true));
    }

    auto loss = fn(leaves);
    if (!std::isfinite(loss.item<double>())) throw ValidationError("non-finite loss at probe point");
    loss.backward();

    // Finite differences run on detached copies so the autograd leaves are
    // never modified in place.
    std::vector<torch::Tensor> probes;
    probes.reserve(leaves.size());
    for (auto& leaf : leaves) probes.push_back(leaf.detach().clone());

    auto eval_probes = [&]() {
        torch::NoGradGuard no_grad;
        const double out = fn(probes).item<double>();
        if (!std::isfinite(out)) throw ValidationError("non-finite loss at probe point");
        return out;
    };

    GradCheckReport report;
    for (size_t j = 0; j < leaves.size(); ++j) {
        auto grad = leaves[j].grad().defined() ? leaves[j].grad().reshape({-1}).clone()
                                               : torch::zeros({leaves[j].numel()}, torch::kDouble);
        auto flat = probes[j].reshape({-1});
        for (int64_t i = 0; i < flat.numel(); ++i) {
            const double orig = flat[i].item<double>();
            flat[i] = orig + h;
            const double up = eval_probes();
            flat[i] = orig - h;
            const double down = eval_probes();
            flat[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double a = grad[i].item<double>();
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1.0});
            report.max_rel_error = std::max(report.max_rel_error, rel);
        }
    }
    report.pass = report.max_rel_error <= tol;
    return report;
}

}  // namespace anglekit::losses
