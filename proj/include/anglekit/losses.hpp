#pragma once

#include <functional>
#include <vector>

#include <torch/torch.h>

namespace anglekit::losses {

struct FocalParams {
    double alpha = 2.0;
    double gamma = 2.0;
    // When set, alpha is applied per class as alpha for positives and
    // (1 - alpha) for negatives instead of one global scalar.
    bool class_balanced = false;
};

struct FBetaParams {
    double beta = 2.0;
    double eps = 1e-6;
    // The loss uses a (1+beta) coefficient on the true-positive mass; this
    // switches to the textbook (1+beta^2) form for comparison runs.
    bool conventional = false;
};

struct HybridParams {
    double rho1 = 0.5;
    double rho2 = 0.5;
};

struct KRParams {
    double rho3 = 100.0;
    double rho4 = 0.2;
    double eps = 1e-6;
};

// pred holds probabilities in (0,1), target holds {0,1}; same shape.
// Per element: yt = y*y' + (1-y)*(1-y'); loss = -alpha * (1-yt)^gamma * log(yt),
// with predictions clamped to [1e-7, 1-1e-7] before the log; reduced by mean.
torch::Tensor focal_loss(const torch::Tensor& pred, const torch::Tensor& target,
                         const FocalParams& p = {});

// Soft counts over the whole tensor: TP = sum(y*y'), FP = sum((1-y)*y'),
// FN = sum(y*(1-y')); loss = 1 - (c*TP + eps) / (c*TP + beta^2*FN + FP + eps)
// with c = 1+beta (or 1+beta^2 when conventional).
torch::Tensor fbeta_loss(const torch::Tensor& pred, const torch::Tensor& target,
                         const FBetaParams& p = {});

// rho1 * focal + rho2 * fbeta.
torch::Tensor hybrid_loss(const torch::Tensor& pred, const torch::Tensor& target,
                          const HybridParams& hp = {}, const FocalParams& fp = {},
                          const FBetaParams& bp = {});

// Keypoint-registration loss over heatmaps in [0,1]:
// rho3 * mean((y-y')^2) + rho4 * (1 - 2*sum(y*y') / (sum(y) + sum(y') + eps)).
torch::Tensor kr_loss(const torch::Tensor& pred, const torch::Tensor& target,
                      const KRParams& p = {});

struct GradCheckReport {
    double max_rel_error = 0.0;
    bool pass = false;
};

// Central finite differences (step 1e-5, double precision) against autograd
// on small tensors; relative error uses max(|analytic|, |numeric|, 1) as the
// denominator and the report passes iff the max over coordinates is <= tol.
GradCheckReport grad_check(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& fn,
                           std::vector<torch::Tensor> inputs, double tol = 1e-4);

}  // namespace anglekit::losses
