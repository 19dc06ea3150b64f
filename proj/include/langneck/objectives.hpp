#pragma once

#include <vector>

#include "langneck/common.hpp"
#include "langneck/model.hpp"
#include "langneck/tensor.hpp"

namespace langneck {

struct LossWeights {
    double lambda_sim = 0.0;
    double lambda_llm = 0.0;
};

inline Tensor classification_loss(const Tensor& class_logits, const std::vector<std::size_t>& labels) {
    return cross_entropy(class_logits, labels);
}

// Mean cosine similarity over all unordered pairs of the n soft word
// vectors; minimizing it pushes the sequence toward diverse tokens.
inline Tensor token_similarity_loss(const Tensor& soft_words) {
    if (soft_words.ndim() != 2) throw DimError("token_similarity_loss: expected n x d");
    const std::size_t n = soft_words.rows();
    if (n < 2) throw ArgumentError("token_similarity_loss: need at least 2 tokens");
    Tensor acc;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            Tensor c = cosine_similarity(slice_rows(soft_words, i, i + 1),
                                         slice_rows(soft_words, j, j + 1));
            acc = acc.defined() ? add(acc, c) : c;
        }
    return scale(acc, 2.0 / (static_cast<double>(n) * static_cast<double>(n - 1)));
}

// The decoder re-reads its own output: soft word vectors as input
// embeddings, no image cross-attention, and the realized hard tokens as
// targets. Mean over positions 2..n of -log p(token_i | soft words < i).
// Gradients flow through the soft word inputs only (the decoder is frozen).
inline Tensor llm_loss(const ModelParams& params, const BottleneckOutput& bottleneck) {
    const std::size_t n = bottleneck.soft_words.rows();
    if (n < 2) throw ArgumentError("llm_loss: need at least 2 positions");
    Tensor logits = decode_logits(params, bottleneck.soft_words, nullptr);
    std::vector<std::size_t> targets(bottleneck.hard_tokens.begin() + 1,
                                     bottleneck.hard_tokens.end());
    return cross_entropy(slice_rows(logits, 0, n - 1), targets);
}

// class + lambda_sim * sim + lambda_llm * llm. Zero-weight terms are not
// added at all, so the (0,0) setting is byte-identical to the plain loss.
inline Tensor total_loss(const Tensor& class_loss, const Tensor& sim_loss, const Tensor& llm_loss_val,
                         const LossWeights& w) {
    if (w.lambda_sim < 0 || w.lambda_llm < 0) throw ArgumentError("loss weights must be >= 0");
    Tensor out = class_loss;
    if (w.lambda_sim != 0.0) out = add(out, scale(sim_loss, w.lambda_sim));
    if (w.lambda_llm != 0.0) out = add(out, scale(llm_loss_val, w.lambda_llm));
    return out;
}

}  // namespace langneck
