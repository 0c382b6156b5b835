#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "histalign/numerics.hpp"
#include "histalign/serialization.hpp"

namespace histalign {

using TokenId = std::uint32_t;

namespace lm {

struct ModelConfig {
    std::uint32_t vocab_size = 0;
    std::uint32_t hidden_size = 0;
    std::uint32_t num_layers = 1;
    std::uint32_t num_heads = 1;
    std::uint32_t context_length = 0;
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument on an unusable configuration.
    void validate() const;
    std::uint32_t ffn_size() const { return 4 * hidden_size; }

    bool operator==(const ModelConfig&) const = default;
};

/// One pre-norm transformer block. Vectors are stored as 1×n matrices.
struct Block {
    Matrix ln1_gain, ln1_bias;
    Matrix qkv_weight;  // d × 3d
    Matrix qv_bias;     // 1 × 2d, query then value (a key bias cannot change attention)
    Matrix out_weight, out_bias;  // d × d
    Matrix ln2_gain, ln2_bias;
    Matrix fc_weight, fc_bias;    // d × 4d
    Matrix proj_weight, proj_bias;  // 4d × d
};

struct Parameters {
    Matrix token_embedding;     // V × d, also the output embedding E
    Matrix position_embedding;  // L × d
    std::vector<Block> blocks;
    Matrix final_gain, final_bias;

    static Parameters zeros(const ModelConfig& config);

    /// Visits every tensor in canonical (checkpoint) order.
    template <typename F>
    void visit(F&& f) {
        f(std::string_view("token_embedding"), token_embedding);
        f(std::string_view("position_embedding"), position_embedding);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            visit_block(i, blocks[i], f);
        }
        f(std::string_view("final.gain"), final_gain);
        f(std::string_view("final.bias"), final_bias);
    }

    template <typename F>
    void visit(F&& f) const {
        const_cast<Parameters*>(this)->visit(
            [&f](std::string_view name, Matrix& m) { f(name, static_cast<const Matrix&>(m)); });
    }

    std::size_t count() const;
    std::vector<double> flatten() const;
    void assign(std::span<const double> flat);
    void set_zero();

    std::vector<io::NamedTensor> to_named_tensors(std::string_view prefix = {}) const;
    /// Fills tensors from a list produced by to_named_tensors with the same prefix;
    /// shapes must already match.
    void load_named_tensors(const std::vector<io::NamedTensor>& tensors, std::string_view prefix = {});

private:
    template <typename F>
    static void visit_block(std::size_t index, Block& b, F& f) {
        const std::string p = "block" + std::to_string(index) + ".";
        f(std::string_view(p + "ln1.gain"), b.ln1_gain);
        f(std::string_view(p + "ln1.bias"), b.ln1_bias);
        f(std::string_view(p + "attn.qkv.weight"), b.qkv_weight);
        f(std::string_view(p + "attn.qv.bias"), b.qv_bias);
        f(std::string_view(p + "attn.out.weight"), b.out_weight);
        f(std::string_view(p + "attn.out.bias"), b.out_bias);
        f(std::string_view(p + "ln2.gain"), b.ln2_gain);
        f(std::string_view(p + "ln2.bias"), b.ln2_bias);
        f(std::string_view(p + "mlp.fc.weight"), b.fc_weight);
        f(std::string_view(p + "mlp.fc.bias"), b.fc_bias);
        f(std::string_view(p + "mlp.proj.weight"), b.proj_weight);
        f(std::string_view(p + "mlp.proj.bias"), b.proj_bias);
    }
};

/// Decoder-only LM with tied input/output embeddings.
class MiniLM {
public:
    MiniLM(ModelConfig config, Parameters params);

    const ModelConfig& config() const { return config_; }
    const Parameters& params() const { return params_; }
    Parameters& params() { return params_; }

    /// The output embedding matrix E (row w is e_w). Same storage as the input embedding.
    const Matrix& embeddings() const { return params_.token_embedding; }

private:
    ModelConfig config_;
    Parameters params_;
};

/// Parameters ~ N(0, 0.02²) from config.seed; biases zero, norm gains one.
MiniLM init_model(const ModelConfig& config);

struct ForwardOutput {
    Matrix hidden_states;  // T × d; row t predicts token t+1
    Matrix logits;         // T × V
};

/// Activations retained for the backward pass.
struct ForwardTrace {
    struct LayerNormCache {
        Matrix normalized;  // x̂
        Vector inv_std;
    };
    struct BlockCache {
        Matrix input;
        LayerNormCache ln1;
        Matrix ln1_out;
        Matrix qkv;
        std::vector<Matrix> attn_probs;  // per head, T × T
        Matrix attn_concat;
        Matrix mid;  // residual stream after attention
        LayerNormCache ln2;
        Matrix ln2_out;
        Matrix fc_pre;
        Matrix fc_act;
    };
    std::vector<TokenId> tokens;
    bool causal = true;
    std::vector<BlockCache> blocks;
    Matrix final_input;
    LayerNormCache final_ln;
};

/// Runs the model over `tokens`. With causal=false every position attends to
/// every other (encoder-style states for source-side memories).
ForwardOutput forward(const MiniLM& model, std::span<const TokenId> tokens, bool causal = true,
                      ForwardTrace* trace = nullptr);

/// logits = hidden · Eᵀ
Matrix logits_from_hidden(const Matrix& hidden, const Matrix& embeddings);

/// Accumulates parameter gradients given dLoss/dHidden. Gradients that reach
/// the output embedding through the logits must be added by the caller.
void backward(const MiniLM& model, const ForwardTrace& trace, const Matrix& d_hidden, Parameters& grads);

// Checkpoint: "HALM", u32 version, config, tensor list.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_model(std::ostream& out, const MiniLM& model);
MiniLM read_model(std::istream& in);
void save_model(const std::filesystem::path& path, const MiniLM& model);
MiniLM load_model(const std::filesystem::path& path);

/// Byte dump of all parameters in canonical order; equal dumps mean bit-identical models.
std::string parameter_dump(const MiniLM& model);

}  // namespace lm
}  // namespace histalign
