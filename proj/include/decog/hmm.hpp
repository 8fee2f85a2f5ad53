#ifndef DECOG_HMM_HPP
#define DECOG_HMM_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace decog {

using TokenId = std::uint32_t;

// Hidden Markov model over token ids, all parameters in log space.
//
// The sequence measure is transition-then-emit: a silent start state is drawn
// from `initial`, and each step first transitions and then emits the next
// token. Every operation below (forward recursion, sampling, training,
// compliance estimation) uses this one convention.
struct Hmm {
    std::uint32_t num_states = 0;  // h
    std::uint32_t vocab_size = 0;  // V, includes the EOS id
    TokenId eos_id = 0;

    std::vector<double> initial;     // h, log pi
    std::vector<double> transition;  // h*h row-major, log A[z -> z']
    std::vector<double> emission;    // h*V row-major, log B[z, x]

    double trans(std::uint32_t z, std::uint32_t z2) const { return transition[std::size_t(z) * num_states + z2]; }
    double emit(std::uint32_t z, TokenId x) const { return emission[std::size_t(z) * vocab_size + x]; }
};

// Throws ConfigError unless every distribution row exp-sums to 1 within tol
// and all entries are non-positive.
void validate_hmm(const Hmm& hmm, double tol = 1e-9);

using ForwardVector = std::vector<double>;  // length h, log joints

// P(z, empty prefix) = pi.
ForwardVector forward_init(const Hmm& hmm);

// Extends a forward vector by one token:
//   out[z'] = logsumexp_z(fwd[z] + A[z,z']) + B[z', token]
ForwardVector forward_step(const Hmm& hmm, const ForwardVector& fwd, TokenId token);

// log P(seq), marginalized over hidden paths; empty sequence gives 0.
double sequence_loglik(const Hmm& hmm, std::span<const TokenId> seq);

// Ancestral sample; stops after the first EOS emission (included) or at
// max_len tokens. Deterministic given the seed.
std::vector<TokenId> sample_sequence(const Hmm& hmm, std::size_t max_len, std::uint64_t seed);

struct TokenCorpus {
    std::vector<std::vector<TokenId>> sequences;
    std::string provenance;
};

// One sequence per line, whitespace-separated decimal ids, final EOS explicit.
void save_corpus(const TokenCorpus& corpus, const std::string& path);
TokenCorpus load_corpus(const std::string& path);

// Checks ids < vocab_size, nonempty sequences, EOS only in final position.
void validate_corpus(const TokenCorpus& corpus, std::uint32_t vocab_size, TokenId eos_id);

struct TrainOptions {
    std::uint32_t num_states = 1;
    std::uint32_t epochs = 100;
    std::uint64_t seed = 0;
    double emission_floor = 1e-12;
    // Stop early once the relative log-likelihood improvement drops below this.
    double rel_tol = 1e-4;
    unsigned threads = 0;  // 0 = pick from hardware
};

struct TrainResult {
    Hmm hmm;
    std::vector<double> loglik_trace;  // corpus log-likelihood entering each epoch
};

// Baum-Welch (full-batch EM). Emission rows are floored and renormalized
// after every M-step. Per-sequence statistics are reduced in ascending
// sequence order, so the result is bit-identical for any thread count.
TrainResult baum_welch_train(const TokenCorpus& corpus, std::uint32_t vocab_size, TokenId eos_id,
                             const TrainOptions& opts);

// Binary model format (magic "DGH1"), written atomically. load_hmm also
// accepts a JSON variant with the same fields for vocabularies up to 1024.
void save_hmm(const Hmm& hmm, const std::string& path);
void save_hmm_json(const Hmm& hmm, const std::string& path);
Hmm load_hmm(const std::string& path);

}  // namespace decog

#endif
