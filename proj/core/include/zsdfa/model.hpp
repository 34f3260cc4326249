#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "zsdfa/image.hpp"
#include "zsdfa/ops.hpp"
#include "zsdfa/synthetic.hpp"

// The attribution network: appearance/edge/noise encoders fused by multi-head
// cross-attention into one visual embedding, a parsing encoder and a language
// encoder used during training only, and the prediction heads.

namespace zsdfa {

struct ConvLayerSpec {
    int out_channels = 0;
    int kernel = 3;
    int stride = 2;
};

struct EncoderConfig {
    int image_size = 64;
    int patch_size = 32;  // richest-patch side feeding the noise encoder
    int d = 64;           // embedding dimension
    int heads = 4;
    int blocks_appearance = 2;
    int blocks_edge = 1;
    int blocks_noise = 1;
    int blocks_parsing = 1;
    int blocks_language = 1;
    int ffn_hidden = 128;
    std::vector<ConvLayerSpec> backbone = {{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};
    int vocab_size = 32;
    int prompt_len = 16;
    int classes = 6;     // training generator count (one-hot width)
    int max_batch = 64;  // pair-gate matrix side

    int head_dim() const { return d / heads; }
    int feat_channels() const { return backbone.back().out_channels; }
    /// Spatial size after the backbone for a square input (valid padding).
    std::pair<int, int> feature_hw(int input_size) const;
    int tokens_for(int input_size) const;

    void validate() const;
    bool same_geometry(const EncoderConfig& other) const;

    static EncoderConfig desk_default();
    /// Full-scale configuration: 224 input, d=512, 6/3/3 visual blocks, 6
    /// parsing/language blocks, c=512 with 7x7 feature maps, 308 prompt
    /// tokens. Constructible but not exercised by the test suite.
    static EncoderConfig full_scale();

    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);
};

/// Which modules participate. `mmi` switches the cross-attention fusion; when
/// off, present view class tokens are summed instead.
struct ModuleSet {
    bool appearance = true;
    bool noise = true;
    bool edge = true;
    bool parsing = true;
    bool language = true;
    bool mmi = true;

    bool any_visual() const { return appearance || noise || edge; }
    std::string describe() const;
};

template <typename T>
struct AffineParams {
    Tensor<T> weight;  // in x out
    Tensor<T> bias;    // 1 x out
};

template <typename T>
struct TransformerBlockParams {
    Tensor<T> ln1_gamma, ln1_beta;
    AffineParams<T> qkv;       // d -> 3d
    AffineParams<T> attn_out;  // d -> d
    Tensor<T> ln2_gamma, ln2_beta;
    AffineParams<T> ffn1, ffn2;
};

template <typename T>
struct ViewEncoderParams {
    std::vector<Tensor<T>> conv_kernels;  // [cout x cin x k x k] per layer
    std::vector<Tensor<T>> conv_biases;
    AffineParams<T> token_proj;  // feat_channels -> d
    Tensor<T> class_token;       // 1 x d
    Tensor<T> pos_embedding;     // (tokens + 1) x d
    std::vector<TransformerBlockParams<T>> blocks;
};

template <typename T>
struct CrossAttentionParams {
    Tensor<T> wq, wk, wv;  // d x d, heads stacked along columns
    Tensor<T> out_proj;    // d x d
};

template <typename T>
struct ModelParams {
    EncoderConfig config;
    ViewEncoderParams<T> appearance, edge, noise, parsing;
    Tensor<T> token_embedding;  // vocab x d
    Tensor<T> lang_pos;         // prompt_len x d
    Tensor<T> lang_class_token;
    std::vector<TransformerBlockParams<T>> lang_blocks;
    CrossAttentionParams<T> fuse_noise, fuse_edge;
    AffineParams<T> head_hidden, head_out;            // d -> d -> classes
    AffineParams<T> predictor_hidden, predictor_out;  // d -> d -> d
    Tensor<T> centers;      // classes x classes, trainable class centers
    Tensor<T> pair_gate;    // max_batch x max_batch similarity gate
    Tensor<T> log_tau;      // scalar; the gated contrastive temperature is exp(log_tau)
    Tensor<T> log_tau_cmc;  // scalar; vision-language temperature

    static ModelParams init(const EncoderConfig& config, std::uint64_t seed);

    std::vector<std::pair<std::string, Tensor<T>*>> named_params();
    std::vector<std::pair<std::string, const Tensor<T>*>> named_params() const;
    void set_requires_grad(bool b);
    std::size_t parameter_count() const;
};

/// Closed-form parameter count; asserted against the actual registry in tests.
std::size_t expected_parameter_count(const EncoderConfig& config);

enum class View { Appearance, Edge, Noise };

template <typename T>
struct ViewEmbedding {
    Tensor<T> cls;    // 1 x d class token
    Tensor<T> patch;  // 1 x d mean-pooled patch token
};

/// Raw pixels scaled by 1/255 -> [3 x H x W].
template <typename T>
Tensor<T> appearance_input(const Image& image);

/// One-hot expansion of the parsing map -> [7 x H x W]. Labels outside [0, 6]
/// raise DataError.
template <typename T>
Tensor<T> parsing_input(const ParsingMap& map);

template <typename T>
ViewEmbedding<T> encode_view(const ModelParams<T>& params, const Tensor<T>& input, View view);

template <typename T>
struct CrossAttentionTrace {
    Tensor<T> attended;                   // 1 x d, heads concatenated, pre-projection
    std::vector<Tensor<T>> head_weights;  // per head, 1 x context_rows
};

/// Single-query multi-head cross-attention over a small context; the output
/// is projected then added residually to the query.
template <typename T>
Tensor<T> cross_attend(const CrossAttentionParams<T>& params, const Tensor<T>& query,
                       const Tensor<T>& context, int heads,
                       CrossAttentionTrace<T>* trace = nullptr);

/// Element-wise sum of the appearance-noise and appearance-edge fusion
/// branches. Ablated views drop their branch; without the appearance view the
/// present class tokens are summed.
template <typename T>
Tensor<T> fuse_views(const ModelParams<T>& params, const ViewEmbedding<T>& appearance,
                     const ViewEmbedding<T>* noise, const ViewEmbedding<T>* edge,
                     const ModuleSet& modules);

template <typename T>
Tensor<T> encode_parsing(const ModelParams<T>& params, const ParsingMap& map);

template <typename T>
Tensor<T> encode_language(const ModelParams<T>& params, std::span<const int> tokens);

/// Visual path shared by training and inference: preprocessing (Sobel edge
/// view, richest-patch SRM noise view), the present view encoders, fusion.
template <typename T>
Tensor<T> visual_embedding(const ModelParams<T>& params, const Image& image,
                           const ModuleSet& modules);

template <typename T>
struct TrainForward {
    Tensor<T> visual;              // b x d
    Tensor<T> parsing;             // b x d (unset when the parsing path is off)
    Tensor<T> language;            // b x d (unset when the language path is off)
    Tensor<T> predicted_language;  // b x d
    Tensor<T> logits;              // b x classes
};

/// Needs b >= 2 (the pairwise losses need pairs). `with_parsing` /
/// `with_language` let loss ablations skip unused paths.
template <typename T>
TrainForward<T> forward_train(const ModelParams<T>& params,
                              std::span<const FaceSample* const> batch,
                              const ModuleSet& modules, bool with_parsing = true,
                              bool with_language = true);

/// Inference path: only the visual encoders and the classification head run,
/// so parsing and language parameters cannot influence the result.
template <typename T>
Tensor<T> forward_infer(const ModelParams<T>& params, const Image& image,
                        const ModuleSet& modules);

} // namespace zsdfa
