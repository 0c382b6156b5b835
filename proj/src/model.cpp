#include "histalign/model.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace histalign::lm {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, ForwardTrace::LayerNormCache* cache) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    Matrix normalized(n, d);
    Vector inv_std(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + kLayerNormEps);
        normalized.row(r) = (x.row(r).array() - mean) * inv_std(r);
    }
    Matrix y = (normalized.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
    if (cache != nullptr) {
        cache->normalized = std::move(normalized);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const ForwardTrace::LayerNormCache& cache, const Matrix& gain,
                           Matrix& d_gain, Matrix& d_bias) {
    const Matrix& xhat = cache.normalized;
    d_gain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    d_bias.row(0) += dy.colwise().sum();
    const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const double mean_dxhat = dxhat.row(r).mean();
        const double mean_dxhat_xhat = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(dy.cols());
        dx.row(r) = cache.inv_std(r) *
                    (dxhat.row(r).array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat).matrix();
    }
    return dx;
}

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

double gelu_grad(double u) {
    const double inner = kGeluC * (u + 0.044715 * u * u * u);
    const double th = std::tanh(inner);
    const double d_inner = kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * d_inner;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 2) {
        throw std::invalid_argument("vocab_size must be at least 2");
    }
    if (hidden_size == 0 || num_layers == 0 || num_heads == 0) {
        throw std::invalid_argument("hidden_size, num_layers and num_heads must be positive");
    }
    if (hidden_size % num_heads != 0) {
        throw std::invalid_argument("hidden_size must be divisible by num_heads");
    }
    if (context_length < 2) {
        throw std::invalid_argument("context_length must be at least 2");
    }
}

Parameters Parameters::zeros(const ModelConfig& config) {
    config.validate();
    const Eigen::Index v = config.vocab_size;
    const Eigen::Index d = config.hidden_size;
    const Eigen::Index f = config.ffn_size();
    Parameters p;
    p.token_embedding = Matrix::Zero(v, d);
    p.position_embedding = Matrix::Zero(config.context_length, d);
    p.blocks.resize(config.num_layers);
    for (auto& b : p.blocks) {
        b.ln1_gain = Matrix::Zero(1, d);
        b.ln1_bias = Matrix::Zero(1, d);
        b.qkv_weight = Matrix::Zero(d, 3 * d);
        b.qv_bias = Matrix::Zero(1, 2 * d);
        b.out_weight = Matrix::Zero(d, d);
        b.out_bias = Matrix::Zero(1, d);
        b.ln2_gain = Matrix::Zero(1, d);
        b.ln2_bias = Matrix::Zero(1, d);
        b.fc_weight = Matrix::Zero(d, f);
        b.fc_bias = Matrix::Zero(1, f);
        b.proj_weight = Matrix::Zero(f, d);
        b.proj_bias = Matrix::Zero(1, d);
    }
    p.final_gain = Matrix::Zero(1, d);
    p.final_bias = Matrix::Zero(1, d);
    return p;
}

std::size_t Parameters::count() const {
    std::size_t n = 0;
    visit([&n](std::string_view, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

std::vector<double> Parameters::flatten() const {
    std::vector<double> flat;
    flat.reserve(count());
    visit([&flat](std::string_view, const Matrix& m) { flat.insert(flat.end(), m.data(), m.data() + m.size()); });
    return flat;
}

void Parameters::assign(std::span<const double> flat) {
    if (flat.size() != count()) {
        throw std::invalid_argument("parameter vector length mismatch");
    }
    std::size_t offset = 0;
    visit([&](std::string_view, Matrix& m) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), m.size(), m.data());
        offset += static_cast<std::size_t>(m.size());
    });
}

void Parameters::set_zero() {
    visit([](std::string_view, Matrix& m) { m.setZero(); });
}

std::vector<io::NamedTensor> Parameters::to_named_tensors(std::string_view prefix) const {
    std::vector<io::NamedTensor> out;
    visit([&](std::string_view name, const Matrix& m) {
        out.push_back({std::string(prefix) + std::string(name), numerics::Tensor::from_matrix(m)});
    });
    return out;
}

void Parameters::load_named_tensors(const std::vector<io::NamedTensor>& tensors, std::string_view prefix) {
    std::size_t index = 0;
    visit([&](std::string_view name, Matrix& m) {
        const std::string expected = std::string(prefix) + std::string(name);
        if (index >= tensors.size() || tensors[index].name != expected) {
            throw io::FormatError("missing or out-of-order tensor '" + expected + "'");
        }
        const auto& t = tensors[index++].tensor;
        if (t.shape.size() != 2 || t.shape[0] != static_cast<std::size_t>(m.rows()) ||
            t.shape[1] != static_cast<std::size_t>(m.cols()) || !t.valid()) {
            throw io::FormatError("tensor '" + expected + "' has the wrong shape");
        }
        std::copy(t.data.begin(), t.data.end(), m.data());
    });
    if (index != tensors.size()) {
        throw io::FormatError("unexpected extra tensors");
    }
}

MiniLM::MiniLM(ModelConfig config, Parameters params) : config_(config), params_(std::move(params)) {
    config_.validate();
    if (params_.token_embedding.rows() != config_.vocab_size ||
        params_.token_embedding.cols() != config_.hidden_size ||
        params_.blocks.size() != config_.num_layers) {
        throw std::invalid_argument("parameters do not match the model configuration");
    }
}

MiniLM init_model(const ModelConfig& config) {
    Parameters p = Parameters::zeros(config);
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, kInitStd);
    auto fill = [&](Matrix& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = normal(rng);
        }
    };
    fill(p.token_embedding);
    fill(p.position_embedding);
    for (auto& b : p.blocks) {
        b.ln1_gain.setOnes();
        b.ln2_gain.setOnes();
        fill(b.qkv_weight);
        fill(b.out_weight);
        fill(b.fc_weight);
        fill(b.proj_weight);
    }
    p.final_gain.setOnes();
    return MiniLM(config, std::move(p));
}

Matrix logits_from_hidden(const Matrix& hidden, const Matrix& embeddings) {
    if (hidden.cols() != embeddings.cols()) {
        throw std::invalid_argument("hidden size does not match embedding width");
    }
    return hidden * embeddings.transpose();
}

ForwardOutput forward(const MiniLM& model, std::span<const TokenId> tokens, bool causal, ForwardTrace* trace) {
    const auto& cfg = model.config();
    const auto& p = model.params();
    const Eigen::Index t_len = static_cast<Eigen::Index>(tokens.size());
    if (tokens.empty() || tokens.size() > cfg.context_length) {
        throw std::invalid_argument("input length must be in [1, context_length]");
    }
    for (TokenId tok : tokens) {
        if (tok >= cfg.vocab_size) {
            throw std::invalid_argument("token id " + std::to_string(tok) + " out of range");
        }
    }
    const Eigen::Index d = cfg.hidden_size;
    const Eigen::Index heads = cfg.num_heads;
    const Eigen::Index hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    if (trace != nullptr) {
        trace->tokens.assign(tokens.begin(), tokens.end());
        trace->causal = causal;
        trace->blocks.assign(p.blocks.size(), {});
    }

    Matrix x(t_len, d);
    for (Eigen::Index t = 0; t < t_len; ++t) {
        x.row(t) = p.token_embedding.row(tokens[static_cast<std::size_t>(t)]) + p.position_embedding.row(t);
    }

    for (std::size_t layer = 0; layer < p.blocks.size(); ++layer) {
        const Block& b = p.blocks[layer];
        ForwardTrace::BlockCache* bc = trace != nullptr ? &trace->blocks[layer] : nullptr;
        ForwardTrace::LayerNormCache ln1_cache;
        Matrix a = layer_norm(x, b.ln1_gain, b.ln1_bias, &ln1_cache);
        Matrix qkv = a * b.qkv_weight;
        qkv.leftCols(d).rowwise() += b.qv_bias.leftCols(d).row(0);
        qkv.rightCols(d).rowwise() += b.qv_bias.rightCols(d).row(0);

        Matrix concat(t_len, d);
        std::vector<Matrix> probs(static_cast<std::size_t>(heads));
        for (Eigen::Index h = 0; h < heads; ++h) {
            const auto q = qkv.middleCols(h * hd, hd);
            const auto k = qkv.middleCols(d + h * hd, hd);
            const auto v = qkv.middleCols(2 * d + h * hd, hd);
            Matrix scores = (q * k.transpose()) * scale;
            for (Eigen::Index i = 0; i < t_len; ++i) {
                const Eigen::Index visible = causal ? i + 1 : t_len;
                const double shift = scores.row(i).head(visible).maxCoeff();
                double total = 0.0;
                for (Eigen::Index j = 0; j < t_len; ++j) {
                    const double e = j < visible ? std::exp(scores(i, j) - shift) : 0.0;
                    scores(i, j) = e;
                    total += e;
                }
                scores.row(i) /= total;
            }
            concat.middleCols(h * hd, hd) = scores * v;
            probs[static_cast<std::size_t>(h)] = std::move(scores);
        }
        Matrix mid = x + ((concat * b.out_weight).rowwise() + b.out_bias.row(0));

        ForwardTrace::LayerNormCache ln2_cache;
        Matrix c = layer_norm(mid, b.ln2_gain, b.ln2_bias, &ln2_cache);
        Matrix fc_pre = (c * b.fc_weight).rowwise() + b.fc_bias.row(0);
        Matrix fc_act = fc_pre.unaryExpr([](double u) { return gelu(u); });
        Matrix out = mid + ((fc_act * b.proj_weight).rowwise() + b.proj_bias.row(0));

        if (bc != nullptr) {
            bc->input = std::move(x);
            bc->ln1 = std::move(ln1_cache);
            bc->ln1_out = std::move(a);
            bc->qkv = std::move(qkv);
            bc->attn_probs = std::move(probs);
            bc->attn_concat = std::move(concat);
            bc->mid = std::move(mid);
            bc->ln2 = std::move(ln2_cache);
            bc->ln2_out = std::move(c);
            bc->fc_pre = std::move(fc_pre);
            bc->fc_act = std::move(fc_act);
        }
        x = std::move(out);
    }

    ForwardOutput result;
    if (trace != nullptr) {
        result.hidden_states = layer_norm(x, p.final_gain, p.final_bias, &trace->final_ln);
        trace->final_input = std::move(x);
    } else {
        result.hidden_states = layer_norm(x, p.final_gain, p.final_bias, nullptr);
    }
    result.logits = logits_from_hidden(result.hidden_states, p.token_embedding);
    return result;
}

void backward(const MiniLM& model, const ForwardTrace& trace, const Matrix& d_hidden, Parameters& grads) {
    const auto& cfg = model.config();
    const auto& p = model.params();
    const Eigen::Index t_len = static_cast<Eigen::Index>(trace.tokens.size());
    if (d_hidden.rows() != t_len || d_hidden.cols() != cfg.hidden_size) {
        throw std::invalid_argument("d_hidden shape does not match the traced forward pass");
    }
    const Eigen::Index d = cfg.hidden_size;
    const Eigen::Index heads = cfg.num_heads;
    const Eigen::Index hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Matrix dx = layer_norm_backward(d_hidden, trace.final_ln, p.final_gain, grads.final_gain, grads.final_bias);

    for (std::size_t layer = p.blocks.size(); layer-- > 0;) {
        const Block& b = p.blocks[layer];
        Block& g = grads.blocks[layer];
        const auto& bc = trace.blocks[layer];

        // MLP branch: out = mid + proj(gelu(fc(ln2(mid))))
        g.proj_bias.row(0) += dx.colwise().sum();
        g.proj_weight.noalias() += bc.fc_act.transpose() * dx;
        Matrix d_act = dx * b.proj_weight.transpose();
        Matrix d_pre = d_act.array() * bc.fc_pre.unaryExpr([](double u) { return gelu_grad(u); }).array();
        g.fc_bias.row(0) += d_pre.colwise().sum();
        g.fc_weight.noalias() += bc.ln2_out.transpose() * d_pre;
        Matrix d_c = d_pre * b.fc_weight.transpose();
        Matrix d_mid = dx + layer_norm_backward(d_c, bc.ln2, b.ln2_gain, g.ln2_gain, g.ln2_bias);

        // Attention branch: mid = input + out(attn(ln1(input)))
        g.out_bias.row(0) += d_mid.colwise().sum();
        g.out_weight.noalias() += bc.attn_concat.transpose() * d_mid;
        Matrix d_concat = d_mid * b.out_weight.transpose();
        Matrix d_qkv = Matrix::Zero(t_len, 3 * d);
        for (Eigen::Index h = 0; h < heads; ++h) {
            const Matrix& probs = bc.attn_probs[static_cast<std::size_t>(h)];
            const auto q = bc.qkv.middleCols(h * hd, hd);
            const auto k = bc.qkv.middleCols(d + h * hd, hd);
            const auto v = bc.qkv.middleCols(2 * d + h * hd, hd);
            const auto d_out = d_concat.middleCols(h * hd, hd);
            Matrix d_probs = d_out * v.transpose();
            d_qkv.middleCols(2 * d + h * hd, hd) += probs.transpose() * d_out;
            Matrix d_scores(t_len, t_len);
            for (Eigen::Index i = 0; i < t_len; ++i) {
                const double inner = d_probs.row(i).dot(probs.row(i));
                d_scores.row(i) = probs.row(i).array() * (d_probs.row(i).array() - inner);
            }
            d_scores *= scale;
            d_qkv.middleCols(h * hd, hd) += d_scores * k;
            d_qkv.middleCols(d + h * hd, hd) += d_scores.transpose() * q;
        }
        g.qv_bias.leftCols(d) += d_qkv.leftCols(d).colwise().sum();
        g.qv_bias.rightCols(d) += d_qkv.rightCols(d).colwise().sum();
        g.qkv_weight.noalias() += bc.ln1_out.transpose() * d_qkv;
        Matrix d_a = d_qkv * b.qkv_weight.transpose();
        dx = d_mid + layer_norm_backward(d_a, bc.ln1, b.ln1_gain, g.ln1_gain, g.ln1_bias);
    }

    for (Eigen::Index t = 0; t < t_len; ++t) {
        grads.token_embedding.row(trace.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
        grads.position_embedding.row(t) += dx.row(t);
    }
}

void write_model(std::ostream& out, const MiniLM& model) {
    const auto& c = model.config();
    io::write_magic(out, "HALM");
    io::write_u32(out, kCheckpointVersion);
    io::write_u32(out, c.vocab_size);
    io::write_u32(out, c.hidden_size);
    io::write_u32(out, c.num_layers);
    io::write_u32(out, c.num_heads);
    io::write_u32(out, c.context_length);
    io::write_u64(out, c.seed);
    io::write_tensor_list(out, model.params().to_named_tensors());
}

MiniLM read_model(std::istream& in) {
    io::expect_magic(in, "HALM");
    const std::uint32_t version = io::read_u32(in);
    if (version != kCheckpointVersion) {
        throw io::FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    ModelConfig c;
    c.vocab_size = io::read_u32(in);
    c.hidden_size = io::read_u32(in);
    c.num_layers = io::read_u32(in);
    c.num_heads = io::read_u32(in);
    c.context_length = io::read_u32(in);
    c.seed = io::read_u64(in);
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw io::FormatError(std::string("invalid model config in checkpoint: ") + e.what());
    }
    Parameters params = Parameters::zeros(c);
    params.load_named_tensors(io::read_tensor_list(in));
    return MiniLM(c, std::move(params));
}

void save_model(const std::filesystem::path& path, const MiniLM& model) {
    std::ostringstream out(std::ios::binary);
    write_model(out, model);
    io::atomic_write(path, out.str());
}

MiniLM load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::invalid_argument("cannot open checkpoint " + path.string());
    }
    return read_model(in);
}

std::string parameter_dump(const MiniLM& model) {
    std::ostringstream out(std::ios::binary);
    model.params().visit([&out](std::string_view, const Matrix& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            io::write_f64(out, m.data()[i]);
        }
    });
    return out.str();
}

}  // namespace histalign::lm
