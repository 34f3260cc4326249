#include "zsdfa/model.hpp"

#include <cmath>

#include "zsdfa/preprocess.hpp"
#include "zsdfa/rng.hpp"

namespace zsdfa {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

std::pair<int, int> EncoderConfig::feature_hw(int input_size) const {
    int s = input_size;
    for (const auto& layer : backbone) {
        if (layer.kernel > s)
            throw ConfigError("backbone kernel " + std::to_string(layer.kernel) +
                              " exceeds feature size " + std::to_string(s));
        s = (s - layer.kernel) / layer.stride + 1;
    }
    return {s, s};
}

int EncoderConfig::tokens_for(int input_size) const {
    auto [h, w] = feature_hw(input_size);
    return h * w;
}

void EncoderConfig::validate() const {
    if (d <= 0 || heads <= 0 || d % heads != 0)
        throw ConfigError("embedding dim " + std::to_string(d) +
                          " must be a positive multiple of heads " + std::to_string(heads));
    if (backbone.empty()) throw ConfigError("backbone needs at least one conv layer");
    for (const auto& l : backbone)
        if (l.out_channels <= 0 || l.kernel <= 0 || l.stride <= 0)
            throw ConfigError("invalid backbone layer spec");
    if (image_size < 16) throw ConfigError("image size must be >= 16");
    if (patch_size <= 0 || patch_size > image_size)
        throw ConfigError("patch size must lie in [1, image size]");
    if (classes < 2) throw ConfigError("need at least 2 training classes");
    if (vocab_size < 2 || prompt_len < 1) throw ConfigError("invalid language geometry");
    if (max_batch < 2) throw ConfigError("max_batch must be >= 2");
    if (ffn_hidden <= 0) throw ConfigError("ffn_hidden must be positive");
    if (blocks_appearance < 0 || blocks_edge < 0 || blocks_noise < 0 ||
        blocks_parsing < 0 || blocks_language < 0)
        throw ConfigError("block counts cannot be negative");
    // Derived geometry must stay positive for every view.
    feature_hw(image_size);
    feature_hw(patch_size);
}

bool EncoderConfig::same_geometry(const EncoderConfig& o) const {
    return to_json() == o.to_json();
}

EncoderConfig EncoderConfig::desk_default() {
    EncoderConfig c;
    c.validate();
    return c;
}

EncoderConfig EncoderConfig::full_scale() {
    EncoderConfig c;
    c.image_size = 224;
    c.patch_size = 112;
    c.d = 512;
    c.heads = 8;
    c.blocks_appearance = 6;
    c.blocks_edge = 3;
    c.blocks_noise = 3;
    c.blocks_parsing = 6;
    c.blocks_language = 6;
    c.ffn_hidden = 2048;
    // Five stride-2 valid convolutions: 224 -> 112 -> 56 -> 28 -> 14 -> 7.
    c.backbone = {{64, 2, 2}, {128, 2, 2}, {256, 2, 2}, {512, 2, 2}, {512, 2, 2}};
    c.prompt_len = 308;
    c.vocab_size = 512;
    c.classes = 10;
    c.validate();
    auto [h, w] = c.feature_hw(c.image_size);
    if (h != 7 || w != 7 || c.feat_channels() != 512)
        throw ConfigError("full-scale configuration geometry drifted");
    return c;
}

nlohmann::json EncoderConfig::to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : backbone)
        layers.push_back({{"out_channels", l.out_channels}, {"kernel", l.kernel}, {"stride", l.stride}});
    return {{"image_size", image_size},
            {"patch_size", patch_size},
            {"d", d},
            {"heads", heads},
            {"blocks_appearance", blocks_appearance},
            {"blocks_edge", blocks_edge},
            {"blocks_noise", blocks_noise},
            {"blocks_parsing", blocks_parsing},
            {"blocks_language", blocks_language},
            {"ffn_hidden", ffn_hidden},
            {"backbone", layers},
            {"vocab_size", vocab_size},
            {"prompt_len", prompt_len},
            {"classes", classes},
            {"max_batch", max_batch}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.d = j.at("d").get<int>();
    c.heads = j.at("heads").get<int>();
    c.blocks_appearance = j.at("blocks_appearance").get<int>();
    c.blocks_edge = j.at("blocks_edge").get<int>();
    c.blocks_noise = j.at("blocks_noise").get<int>();
    c.blocks_parsing = j.at("blocks_parsing").get<int>();
    c.blocks_language = j.at("blocks_language").get<int>();
    c.ffn_hidden = j.at("ffn_hidden").get<int>();
    c.backbone.clear();
    for (const auto& l : j.at("backbone"))
        c.backbone.push_back({l.at("out_channels").get<int>(), l.at("kernel").get<int>(),
                              l.at("stride").get<int>()});
    c.vocab_size = j.at("vocab_size").get<int>();
    c.prompt_len = j.at("prompt_len").get<int>();
    c.classes = j.at("classes").get<int>();
    c.max_batch = j.at("max_batch").get<int>();
    c.validate();
    return c;
}

std::string ModuleSet::describe() const {
    std::string s;
    auto tag = [&s](bool on, const char* name) {
        if (on) {
            if (!s.empty()) s += "+";
            s += name;
        }
    };
    tag(appearance, "AE");
    tag(noise, "NE");
    tag(edge, "EE");
    tag(parsing, "PE");
    tag(language, "LE");
    if (!mmi) s += "-MMI";
    return s;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> xavier(Rng& rng, std::vector<int> shape, int fan_in, int fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (auto& v : t.raw()) v = static_cast<T>(rng.uniform(-limit, limit));
    return t;
}

template <typename T>
Tensor<T> gaussian(Rng& rng, std::vector<int> shape, double stddev) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (auto& v : t.raw()) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

template <typename T>
AffineParams<T> make_affine(Rng& rng, int in, int out) {
    return {xavier<T>(rng, {in, out}, in, out), Tensor<T>::zeros({1, out})};
}

template <typename T>
TransformerBlockParams<T> make_block(Rng& rng, const EncoderConfig& cfg) {
    TransformerBlockParams<T> b;
    b.ln1_gamma = Tensor<T>::full({cfg.d}, T(1));
    b.ln1_beta = Tensor<T>::zeros({cfg.d});
    b.qkv = make_affine<T>(rng, cfg.d, 3 * cfg.d);
    b.attn_out = make_affine<T>(rng, cfg.d, cfg.d);
    b.ln2_gamma = Tensor<T>::full({cfg.d}, T(1));
    b.ln2_beta = Tensor<T>::zeros({cfg.d});
    b.ffn1 = make_affine<T>(rng, cfg.d, cfg.ffn_hidden);
    b.ffn2 = make_affine<T>(rng, cfg.ffn_hidden, cfg.d);
    return b;
}

template <typename T>
ViewEncoderParams<T> make_view(Rng& rng, const EncoderConfig& cfg, int in_channels,
                               int input_size, int blocks) {
    ViewEncoderParams<T> v;
    int  cin = in_channels;
    for (const auto& layer : cfg.backbone) {
        const int fan_in = cin * layer.kernel * layer.kernel;
        const int fan_out = layer.out_channels * layer.kernel * layer.kernel;
        v.conv_kernels.push_back(xavier<T>(
            rng, {layer.out_channels, cin, layer.kernel, layer.kernel}, fan_in, fan_out));
        v.conv_biases.push_back(Tensor<T>::zeros({layer.out_channels}));
        cin = layer.out_channels;
    }
    v.token_proj = make_affine<T>(rng, cfg.feat_channels(), cfg.d);
    v.class_token = gaussian<T>(rng, {1, cfg.d}, 0.02);
    v.pos_embedding = gaussian<T>(rng, {cfg.tokens_for(input_size) + 1, cfg.d}, 0.02);
    for (int i = 0; i < blocks; ++i) v.blocks.push_back(make_block<T>(rng, cfg));
    return v;
}

template <typename T>
CrossAttentionParams<T> make_cross(Rng& rng, const EncoderConfig& cfg) {
    CrossAttentionParams<T> c;
    c.wq = xavier<T>(rng, {cfg.d, cfg.d}, cfg.d, cfg.d);
    c.wk = xavier<T>(rng, {cfg.d, cfg.d}, cfg.d, cfg.d);
    c.wv = xavier<T>(rng, {cfg.d, cfg.d}, cfg.d, cfg.d);
    c.out_proj = xavier<T>(rng, {cfg.d, cfg.d}, cfg.d, cfg.d);
    return c;
}

} // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(hash_seed(seed, 0x10de1ULL));
    ModelParams<T> p;
    p.config = config;
    p.appearance = make_view<T>(rng, config, 3, config.image_size, config.blocks_appearance);
    p.edge = make_view<T>(rng, config, 1, config.image_size, config.blocks_edge);
    p.noise = make_view<T>(rng, config, 3, config.patch_size, config.blocks_noise);
    p.parsing = make_view<T>(rng, config, kNumParsingLabels, config.image_size,
                             config.blocks_parsing);
    p.token_embedding = gaussian<T>(rng, {config.vocab_size, config.d}, 0.02);
    p.lang_pos = gaussian<T>(rng, {config.prompt_len, config.d}, 0.02);
    p.lang_class_token = gaussian<T>(rng, {1, config.d}, 0.02);
    for (int i = 0; i < config.blocks_language; ++i)
        p.lang_blocks.push_back(make_block<T>(rng, config));
    p.fuse_noise = make_cross<T>(rng, config);
    p.fuse_edge = make_cross<T>(rng, config);
    p.head_hidden = make_affine<T>(rng, config.d, config.d);
    p.head_out = make_affine<T>(rng, config.d, config.classes);
    p.predictor_hidden = make_affine<T>(rng, config.d, config.d);
    p.predictor_out = make_affine<T>(rng, config.d, config.d);
    p.centers = Tensor<T>::zeros({config.classes, config.classes});
    p.pair_gate = Tensor<T>::zeros({config.max_batch, config.max_batch});
    p.log_tau = Tensor<T>::zeros({1});
    p.log_tau_cmc = Tensor<T>::scalar(static_cast<T>(std::log(0.07)));
    p.set_requires_grad(true);
    return p;
}

namespace {

template <typename T, typename P, typename Fn>
void visit_params(P& p, Fn&& fn) {
    auto affine = [&fn](const std::string& name, auto& a) {
        fn(name + ".weight", a.weight);
        fn(name + ".bias", a.bias);
    };
    auto block = [&](const std::string& name, auto& b) {
        fn(name + ".ln1.gamma", b.ln1_gamma);
        fn(name + ".ln1.beta", b.ln1_beta);
        affine(name + ".qkv", b.qkv);
        affine(name + ".attn_out", b.attn_out);
        fn(name + ".ln2.gamma", b.ln2_gamma);
        fn(name + ".ln2.beta", b.ln2_beta);
        affine(name + ".ffn1", b.ffn1);
        affine(name + ".ffn2", b.ffn2);
    };
    auto view = [&](const std::string& name, auto& v) {
        for (std::size_t i = 0; i < v.conv_kernels.size(); ++i) {
            fn(name + ".conv" + std::to_string(i) + ".kernel", v.conv_kernels[i]);
            fn(name + ".conv" + std::to_string(i) + ".bias", v.conv_biases[i]);
        }
        affine(name + ".proj", v.token_proj);
        fn(name + ".cls", v.class_token);
        fn(name + ".pos", v.pos_embedding);
        for (std::size_t i = 0; i < v.blocks.size(); ++i)
            block(name + ".block" + std::to_string(i), v.blocks[i]);
    };
    auto cross = [&fn](const std::string& name, auto& c) {
        fn(name + ".wq", c.wq);
        fn(name + ".wk", c.wk);
        fn(name + ".wv", c.wv);
        fn(name + ".out_proj", c.out_proj);
    };

    view("appearance", p.appearance);
    view("edge", p.edge);
    view("noise", p.noise);
    view("parsing", p.parsing);
    fn("language.embedding", p.token_embedding);
    fn("language.pos", p.lang_pos);
    fn("language.cls", p.lang_class_token);
    for (std::size_t i = 0; i < p.lang_blocks.size(); ++i)
        block("language.block" + std::to_string(i), p.lang_blocks[i]);
    cross("fuse_noise", p.fuse_noise);
    cross("fuse_edge", p.fuse_edge);
    affine("head.hidden", p.head_hidden);
    affine("head.out", p.head_out);
    affine("predictor.hidden", p.predictor_hidden);
    affine("predictor.out", p.predictor_out);
    fn("centers", p.centers);
    fn("pair_gate", p.pair_gate);
    fn("dcpc.log_tau", p.log_tau);
    fn("cmc.log_tau", p.log_tau_cmc);
}

} // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ModelParams<T>::named_params() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    visit_params<T>(*this, [&out](const std::string& name, Tensor<T>& t) {
        out.emplace_back(name, &t);
    });
    return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> ModelParams<T>::named_params() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    visit_params<T>(*this, [&out](const std::string& name, const Tensor<T>& t) {
        out.emplace_back(name, &t);
    });
    return out;
}

template <typename T>
void ModelParams<T>::set_requires_grad(bool b) {
    visit_params<T>(*this, [b](const std::string&, Tensor<T>& t) { t.set_requires_grad(b); });
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    visit_params<T>(*this, [&n](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
}

std::size_t expected_parameter_count(const EncoderConfig& c) {
    const std::size_t d = c.d;
    const std::size_t block = 4 * d                      // two layer norms
                              + (d * 3 * d + 3 * d)      // qkv
                              + (d * d + d)              // attention projection
                              + (d * c.ffn_hidden + c.ffn_hidden) +
                              (static_cast<std::size_t>(c.ffn_hidden) * d + d);
    auto view = [&](int in_channels, int input_size, int blocks) {
        std::size_t n = 0;
        int cin = in_channels;
        for (const auto& l : c.backbone) {
            n += static_cast<std::size_t>(l.out_channels) * cin * l.kernel * l.kernel +
                 l.out_channels;
            cin = l.out_channels;
        }
        n += static_cast<std::size_t>(c.feat_channels()) * d + d;   // token projection
        n += d;                                                     // class token
        n += static_cast<std::size_t>(c.tokens_for(input_size) + 1) * d;
        n += blocks * block;
        return n;
    };
    std::size_t n = 0;
    n += view(3, c.image_size, c.blocks_appearance);
    n += view(1, c.image_size, c.blocks_edge);
    n += view(3, c.patch_size, c.blocks_noise);
    n += view(kNumParsingLabels, c.image_size, c.blocks_parsing);
    n += static_cast<std::size_t>(c.vocab_size) * d;  // token embedding
    n += static_cast<std::size_t>(c.prompt_len) * d;  // language positions
    n += d;                                           // language class token
    n += static_cast<std::size_t>(c.blocks_language) * block;
    n += 2 * 4 * d * d;                               // two cross-attention fusers
    n += (d * d + d) + (d * c.classes + c.classes);   // classification head
    n += 2 * (d * d + d);                             // predictor head
    n += static_cast<std::size_t>(c.classes) * c.classes;
    n += static_cast<std::size_t>(c.max_batch) * c.max_batch;
    n += 2;  // the two log-temperatures
    return n;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> appearance_input(const Image& image) {
    Tensor<T> t = Tensor<T>::zeros({3, image.h, image.w});
    auto d = t.raw();
    const std::size_t plane = static_cast<std::size_t>(image.h) * image.w;
    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                d[ch * plane + static_cast<std::size_t>(y) * image.w + x] =
                    static_cast<T>(image.at(y, x, ch) / 255.0);
    return t;
}

template <typename T>
Tensor<T> parsing_input(const ParsingMap& map) {
    Tensor<T> t = Tensor<T>::zeros({kNumParsingLabels, map.h, map.w});
    auto d = t.raw();
    const std::size_t plane = static_cast<std::size_t>(map.h) * map.w;
    for (std::size_t i = 0; i < map.labels.size(); ++i) {
        const std::uint8_t label = map.labels[i];
        if (label >= kNumParsingLabels)
            throw DataError("parsing label " + std::to_string(label) + " outside [0, 6]");
        d[label * plane + i] = T(1);
    }
    return t;
}

namespace {

template <typename T>
Tensor<T> affine_apply(const AffineParams<T>& a, const Tensor<T>& x) {
    return add_rowvec(matmul(x, a.weight), a.bias);
}

template <typename T>
Tensor<T> multi_head_self_attention(const TransformerBlockParams<T>& p, const Tensor<T>& x,
                                    int heads) {
    const int d = x.dim(1);
    const int dh = d / heads;
    Tensor<T> qkv = affine_apply(p.qkv, x);
    Tensor<T> q = col_slice(qkv, 0, d);
    Tensor<T> k = col_slice(qkv, d, d);
    Tensor<T> v = col_slice(qkv, 2 * d, d);
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(double(dh)));
    std::vector<Tensor<T>> ctx;
    ctx.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Tensor<T> qh = col_slice(q, h * dh, dh);
        Tensor<T> kh = col_slice(k, h * dh, dh);
        Tensor<T> vh = col_slice(v, h * dh, dh);
        Tensor<T> weights = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
        ctx.push_back(matmul(weights, vh));
    }
    return affine_apply(p.attn_out, concat_cols(ctx));
}

template <typename T>
Tensor<T> transformer_block(const TransformerBlockParams<T>& p, const Tensor<T>& x,
                            int heads) {
    Tensor<T> attended =
        add(x, multi_head_self_attention(p, layer_norm(x, p.ln1_gamma, p.ln1_beta), heads));
    Tensor<T> normed = layer_norm(attended, p.ln2_gamma, p.ln2_beta);
    Tensor<T> ffn = affine_apply(p.ffn2, gelu(affine_apply(p.ffn1, normed)));
    return add(attended, ffn);
}

template <typename T>
Tensor<T> encoder_tokens(const ViewEncoderParams<T>& v, const EncoderConfig& cfg,
                         const Tensor<T>& input) {
    Tensor<T> x = input;
    for (std::size_t i = 0; i < v.conv_kernels.size(); ++i) {
        x = conv2d(x, v.conv_kernels[i], cfg.backbone[i].stride);
        x = gelu(channel_bias(x, v.conv_biases[i]));
    }
    Tensor<T> tokens = affine_apply(v.token_proj, spatial_tokens(x));
    Tensor<T> seq = concat_rows<T>({v.class_token, tokens});
    if (seq.shape() != v.pos_embedding.shape())
        throw ShapeError("view token sequence " + shape_str(seq.shape()) +
                         " does not match positional table " +
                         shape_str(v.pos_embedding.shape()));
    seq = add(seq, v.pos_embedding);
    for (const auto& b : v.blocks) seq = transformer_block(b, seq, cfg.heads);
    return seq;
}

} // namespace

template <typename T>
ViewEmbedding<T> encode_view(const ModelParams<T>& params, const Tensor<T>& input,
                             View view) {
    const EncoderConfig& cfg = params.config;
    const ViewEncoderParams<T>* v = nullptr;
    std::vector<int> expected;
    switch (view) {
        case View::Appearance:
            v = &params.appearance;
            expected = {3, cfg.image_size, cfg.image_size};
            break;
        case View::Edge:
            v = &params.edge;
            expected = {1, cfg.image_size, cfg.image_size};
            break;
        case View::Noise:
            v = &params.noise;
            expected = {3, cfg.patch_size, cfg.patch_size};
            break;
    }
    if (input.shape() != expected)
        throw ShapeError("encode_view: input " + shape_str(input.shape()) +
                         " does not match configured " + shape_str(expected));
    Tensor<T> seq = encoder_tokens(*v, cfg, input);
    const int n = seq.dim(0) - 1;
    return {row_slice(seq, 0, 1), mean_rows(row_slice(seq, 1, n))};
}

template <typename T>
Tensor<T> cross_attend(const CrossAttentionParams<T>& p, const Tensor<T>& query,
                       const Tensor<T>& context, int heads,
                       CrossAttentionTrace<T>* trace) {
    const int d = query.dim(1);
    if (d % heads != 0) throw ConfigError("cross_attend: d must be divisible by heads");
    const int dh = d / heads;
    Tensor<T> q = matmul(query, p.wq);
    Tensor<T> k = matmul(context, p.wk);
    Tensor<T> v = matmul(context, p.wv);
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(double(dh)));
    std::vector<Tensor<T>> outs;
    outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Tensor<T> qh = col_slice(q, h * dh, dh);
        Tensor<T> kh = col_slice(k, h * dh, dh);
        Tensor<T> vh = col_slice(v, h * dh, dh);
        Tensor<T> weights = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
        if (trace) trace->head_weights.push_back(weights);
        outs.push_back(matmul(weights, vh));
    }
    Tensor<T> attended = concat_cols(outs);
    if (trace) trace->attended = attended;
    return add(query, matmul(attended, p.out_proj));
}

template <typename T>
Tensor<T> fuse_views(const ModelParams<T>& params, const ViewEmbedding<T>& appearance,
                     const ViewEmbedding<T>* noise, const ViewEmbedding<T>* edge,
                     const ModuleSet& modules) {
    if (!modules.any_visual())
        throw ConfigError("fuse_views: at least one visual view must be enabled");
    if (!modules.appearance) {
        // Degenerate single/two-view configurations: sum the class tokens.
        Tensor<T> acc;
        bool first = true;
        for (const ViewEmbedding<T>* v : {noise, edge}) {
            if (!v) continue;
            acc = first ? v->cls : add(acc, v->cls);
            first = false;
        }
        if (first) throw ConfigError("fuse_views: no enabled view produced an embedding");
        return acc;
    }
    if (!modules.mmi) {
        Tensor<T> acc = appearance.cls;
        if (noise) acc = add(acc, noise->cls);
        if (edge) acc = add(acc, edge->cls);
        return acc;
    }
    Tensor<T> acc;
    bool first = true;
    if (noise) {
        Tensor<T> ctx = concat_rows<T>({noise->cls, noise->patch});
        acc = cross_attend(params.fuse_noise, appearance.cls, ctx, params.config.heads);
        first = false;
    }
    if (edge) {
        Tensor<T> ctx = concat_rows<T>({edge->cls, edge->patch});
        Tensor<T> branch = cross_attend(params.fuse_edge, appearance.cls, ctx, params.config.heads);
        acc = first ? branch : add(acc, branch);
        first = false;
    }
    return first ? appearance.cls : acc;
}

template <typename T>
Tensor<T> encode_parsing(const ModelParams<T>& params, const ParsingMap& map) {
    Tensor<T> input = parsing_input<T>(map);
    const EncoderConfig& cfg = params.config;
    if (map.h != cfg.image_size || map.w != cfg.image_size)
        throw ShapeError("encode_parsing: map " + std::to_string(map.h) + "x" +
                         std::to_string(map.w) + " does not match image size " +
                         std::to_string(cfg.image_size));
    Tensor<T> seq = encoder_tokens(params.parsing, cfg, input);
    return row_slice(seq, 0, 1);
}

template <typename T>
Tensor<T> encode_language(const ModelParams<T>& params, std::span<const int> tokens) {
    const EncoderConfig& cfg = params.config;
    if (static_cast<int>(tokens.size()) != cfg.prompt_len)
        throw ShapeError("encode_language: expected " + std::to_string(cfg.prompt_len) +
                         " tokens, got " + std::to_string(tokens.size()));
    Tensor<T> embedded = gather_rows(params.token_embedding, tokens);
    Tensor<T> seq = concat_rows<T>({params.lang_class_token, add(embedded, params.lang_pos)});
    for (const auto& b : params.lang_blocks) seq = transformer_block(b, seq, cfg.heads);
    return row_slice(seq, 0, 1);
}

template <typename T>
Tensor<T> visual_embedding(const ModelParams<T>& params, const Image& image,
                           const ModuleSet& modules) {
    if (!modules.any_visual())
        throw ConfigError("visual_embedding: all visual views are disabled");
    const EncoderConfig& cfg = params.config;
    if (image.h != cfg.image_size || image.w != cfg.image_size)
        throw ShapeError("visual_embedding: image " + std::to_string(image.h) + "x" +
                         std::to_string(image.w) + " does not match configured size " +
                         std::to_string(cfg.image_size));

    ViewEmbedding<T> app, noise_emb, edge_emb;
    if (modules.appearance)
        app = encode_view(params, appearance_input<T>(image), View::Appearance);
    if (modules.noise) {
        auto [patch, origin] = richest_patch(image, cfg.patch_size);
        (void)origin;
        noise_emb = encode_view(params, srm_noise<T>(patch), View::Noise);
    }
    if (modules.edge)
        edge_emb = encode_view(params, sobel_edges<T>(image), View::Edge);

    if (!modules.appearance) {
        ViewEmbedding<T>* n = modules.noise ? &noise_emb : nullptr;
        ViewEmbedding<T>* e = modules.edge ? &edge_emb : nullptr;
        return fuse_views(params, app, n, e, modules);
    }
    return fuse_views(params, app, modules.noise ? &noise_emb : nullptr,
                      modules.edge ? &edge_emb : nullptr, modules);
}

namespace {

template <typename T>
Tensor<T> two_layer_head(const AffineParams<T>& hidden, const AffineParams<T>& out,
                         const Tensor<T>& x) {
    return affine_apply(out, gelu(affine_apply(hidden, x)));
}

} // namespace

template <typename T>
TrainForward<T> forward_train(const ModelParams<T>& params,
                              std::span<const FaceSample* const> batch,
                              const ModuleSet& modules, bool with_parsing,
                              bool with_language) {
    if (batch.size() < 2)
        throw ConfigError("forward_train: batch must hold at least 2 samples, got " +
                          std::to_string(batch.size()));
    const bool parsing_path = modules.parsing && with_parsing;
    const bool language_path = modules.language && with_language;

    std::vector<Tensor<T>> visual_rows, parsing_rows, language_rows;
    visual_rows.reserve(batch.size());
    for (const FaceSample* s : batch) {
        visual_rows.push_back(visual_embedding(params, s->image, modules));
        if (parsing_path) parsing_rows.push_back(encode_parsing(params, s->parsing));
        if (language_path) language_rows.push_back(encode_language<T>(params, s->prompt_tokens));
    }

    TrainForward<T> out;
    out.visual = concat_rows(visual_rows);
    if (parsing_path) out.parsing = concat_rows(parsing_rows);
    if (language_path) out.language = concat_rows(language_rows);
    out.predicted_language =
        two_layer_head(params.predictor_hidden, params.predictor_out, out.visual);
    out.logits = two_layer_head(params.head_hidden, params.head_out, out.visual);
    return out;
}

template <typename T>
Tensor<T> forward_infer(const ModelParams<T>& params, const Image& image,
                        const ModuleSet& modules) {
    Tensor<T> visual = visual_embedding(params, image, modules);
    return two_layer_head(params.head_hidden, params.head_out, visual);
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

template struct ModelParams<float>;
template struct ModelParams<double>;

template Tensor<float> appearance_input<float>(const Image&);
template Tensor<double> appearance_input<double>(const Image&);
template Tensor<float> parsing_input<float>(const ParsingMap&);
template Tensor<double> parsing_input<double>(const ParsingMap&);

template ViewEmbedding<float> encode_view(const ModelParams<float>&, const Tensor<float>&, View);
template ViewEmbedding<double> encode_view(const ModelParams<double>&, const Tensor<double>&, View);

template Tensor<float> cross_attend(const CrossAttentionParams<float>&, const Tensor<float>&,
                                    const Tensor<float>&, int, CrossAttentionTrace<float>*);
template Tensor<double> cross_attend(const CrossAttentionParams<double>&, const Tensor<double>&,
                                     const Tensor<double>&, int, CrossAttentionTrace<double>*);

template Tensor<float> fuse_views(const ModelParams<float>&, const ViewEmbedding<float>&,
                                  const ViewEmbedding<float>*, const ViewEmbedding<float>*,
                                  const ModuleSet&);
template Tensor<double> fuse_views(const ModelParams<double>&, const ViewEmbedding<double>&,
                                   const ViewEmbedding<double>*, const ViewEmbedding<double>*,
                                   const ModuleSet&);

template Tensor<float> encode_parsing(const ModelParams<float>&, const ParsingMap&);
template Tensor<double> encode_parsing(const ModelParams<double>&, const ParsingMap&);

template Tensor<float> encode_language(const ModelParams<float>&, std::span<const int>);
template Tensor<double> encode_language(const ModelParams<double>&, std::span<const int>);

template Tensor<float> visual_embedding(const ModelParams<float>&, const Image&, const ModuleSet&);
template Tensor<double> visual_embedding(const ModelParams<double>&, const Image&, const ModuleSet&);

template TrainForward<float> forward_train(const ModelParams<float>&,
                                           std::span<const FaceSample* const>,
                                           const ModuleSet&, bool, bool);
template TrainForward<double> forward_train(const ModelParams<double>&,
                                            std::span<const FaceSample* const>,
                                            const ModuleSet&, bool, bool);

template Tensor<float> forward_infer(const ModelParams<float>&, const Image&, const ModuleSet&);
template Tensor<double> forward_infer(const ModelParams<double>&, const Image&, const ModuleSet&);

} // namespace zsdfa
