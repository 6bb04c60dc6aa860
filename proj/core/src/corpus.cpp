#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>

#include "miniprune/dataio.hpp"
#include "miniprune/error.hpp"

namespace miniprune {

std::vector<std::int32_t> tokenize_bytes(std::string_view text) {
    std::vector<std::int32_t> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<std::int32_t>(c));
    return out;
}

std::string detokenize_bytes(std::span<const std::int32_t> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (auto t : tokens) {
        if (t < 0 || t >= kByteVocab) throw InputError("token " + std::to_string(t) + " is not a byte");
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

std::span<const std::int32_t> Corpus::train() const {
    return std::span<const std::int32_t>(tokens).first(static_cast<std::size_t>(train_end));
}

std::span<const std::int32_t> Corpus::validation() const {
    return std::span<const std::int32_t>(tokens).subspan(static_cast<std::size_t>(train_end));
}

Corpus make_corpus(std::string_view text, double train_fraction, std::string source) {
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("data.split must lie in (0, 1]");
    if (text.empty()) throw InputError("corpus " + source + " is empty");
    Corpus c;
    c.tokens = tokenize_bytes(text);
    c.source = std::move(source);
    c.train_end = static_cast<std::int64_t>(std::floor(train_fraction * static_cast<double>(c.tokens.size())));
    return c;
}

Corpus load_corpus(const std::filesystem::path& path, double train_fraction) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open corpus '" + path.string() + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return make_corpus(text, train_fraction, path.string());
}

namespace {

struct WordList {
    std::vector<std::string_view> words;
    std::vector<double> cumulative;

    WordList(std::initializer_list<std::string_view> w) : words(w) {
        double total = 0.0;
        for (std::size_t i = 0; i < words.size(); ++i) {
            total += 1.0 / static_cast<double>(i + 1);
            cumulative.push_back(total);
        }
        for (auto& c : cumulative) c /= total;
    }

    std::string_view pick(RngStream& rng) const {
        const double u = rng.next_uniform();
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        return words[std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), words.size() - 1)];
    }
};

const WordList& nouns() {
    static const WordList w{"river", "garden", "village", "teacher", "machine", "child", "window", "forest", "letter",
                            "market", "doctor", "horse", "kitchen", "storm", "friend", "bridge", "island", "painter",
                            "engine", "student", "mountain", "library", "farmer", "candle", "soldier", "harbor",
                            "basket", "merchant", "lantern", "station", "captain", "meadow", "clock", "sailor",
                            "orchard", "tower", "writer", "valley", "wagon", "singer"};
    return w;
}
const WordList& adjectives() {
    static const WordList w{"old", "quiet", "bright", "small", "heavy", "green", "cold", "gentle", "broken", "tall",
                            "distant", "warm", "careful", "narrow", "golden", "empty", "ancient", "busy", "silent",
                            "clever", "wooden", "strange", "patient", "dark", "tired", "young", "proud", "simple"};
    return w;
}
const WordList& verbs() {
    static const WordList w{"watched", "carried", "found", "opened", "followed", "painted", "repaired", "visited",
                            "crossed", "remembered", "built", "cleaned", "described", "lifted", "noticed", "sold",
                            "answered", "guarded", "measured", "borrowed", "counted", "called", "moved", "studied"};
    return w;
}
const WordList& intransitive() {
    static const WordList w{"waited", "slept", "laughed", "arrived", "wandered", "listened", "rested", "worked",
                            "smiled", "returned", "stayed", "vanished", "sang", "hurried", "paused"};
    return w;
}
const WordList& adverbs() {
    static const WordList w{"slowly", "quietly", "again", "early", "carefully", "often", "suddenly", "almost",
                            "gladly", "softly", "later", "once"};
    return w;
}
const WordList& prepositions() {
    static const WordList w{"near", "behind", "across", "under", "beside", "beyond", "inside", "along", "toward",
                            "above"};
    return w;
}
const WordList& names_list() {
    static const WordList w{"Anna", "Tomas", "Mira", "Jonah", "Elena", "Peter", "Lucia", "Oskar", "Nadia", "Hugo"};
    return w;
}
const WordList& times() {
    static const WordList w{"in the morning", "at night", "after the rain", "before dinner", "in the spring",
                            "on that day", "every winter", "by noon"};
    return w;
}

class SentenceWriter {
public:
    explicit SentenceWriter(RngStream& rng) : rng_(rng) {}

    std::string noun_phrase(std::string_view topic) {
        std::string np = coin(0.5) ? "the " : "a ";
        if (coin(0.45)) np.append(adjectives().pick(rng_)).push_back(' ');
        np.append(coin(0.35) ? topic : nouns().pick(rng_));
        return np;
    }

    std::string subject(std::string_view topic, std::string_view name) {
        const double u = rng_.next_uniform();
        if (u < 0.25) return std::string(name);
        if (u < 0.55) return "the " + std::string(topic);
        return noun_phrase(topic);
    }

    std::string sentence(std::string_view topic, std::string_view name) {
        std::string s = subject(topic, name);
        const double form = rng_.next_uniform();
        if (form < 0.45) {
            s += " " + std::string(verbs().pick(rng_)) + " " + noun_phrase(topic);
            if (coin(0.5)) s += " " + std::string(prepositions().pick(rng_)) + " " + noun_phrase(topic);
        } else if (form < 0.7) {
            s += " " + std::string(intransitive().pick(rng_));
            if (coin(0.5)) s += " " + std::string(adverbs().pick(rng_));
            if (coin(0.5)) s += " " + std::string(times().pick(rng_));
        } else if (form < 0.85) {
            s += " was " + std::string(adjectives().pick(rng_)) + " and " + std::string(adjectives().pick(rng_));
        } else {
            s += " " + std::string(verbs().pick(rng_)) + " " + noun_phrase(topic) + ", and then " +
                 std::string(name) + " " + std::string(intransitive().pick(rng_));
        }
        s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
        s += coin(0.9) ? ". " : "! ";
        return s;
    }

private:
    bool coin(double p) { return rng_.next_uniform() < p; }
    RngStream& rng_;
};

}  // namespace

std::string synthesize_corpus(std::uint64_t seed, std::size_t bytes) {
    RngStream rng(seed, fnv1a64("synthetic-corpus"));
    SentenceWriter writer(rng);
    std::string out;
    out.reserve(bytes + 512);
    while (out.size() < bytes) {
        const std::string topic(nouns().pick(rng));
        const std::string name(names_list().pick(rng));
        const int sentences = 3 + static_cast<int>(rng.next_below(5));
        for (int i = 0; i < sentences; ++i) out += writer.sentence(topic, name);
        out.back() = '\n';
        out += '\n';
    }
    out.resize(bytes);
    return out;
}

BatchIterator::BatchIterator(std::span<const std::int32_t> tokens, int batch_size, int seq_len, std::uint64_t seed)
    : tokens_(tokens), batch_size_(batch_size), seq_len_(seq_len), seed_(seed) {
    if (batch_size <= 0 || seq_len <= 0) throw ConfigError("batch_size and seq_len must be positive");
    const auto n = static_cast<std::int64_t>(tokens.size());
    const std::int64_t window = seq_len + 1;
    if (n < window)
        throw InputError("corpus of " + std::to_string(n) + " tokens is shorter than one window of " +
                         std::to_string(window));
    // Worst-case offset leaves room for floor((n - seq_len) / window) windows.
    windows_per_epoch_ = (n - seq_len) / window;
    if (windows_per_epoch_ < batch_size)
        throw InputError("corpus holds " + std::to_string(windows_per_epoch_) + " windows, fewer than batch_size " +
                         std::to_string(batch_size));
}

void BatchIterator::begin_epoch() {
    ++epoch_;
    RngStream rng(seed_, mix64(static_cast<std::uint64_t>(epoch_) + 0x5eed));
    const std::int64_t window = seq_len_ + 1;
    const auto n = static_cast<std::int64_t>(tokens_.size());
    const std::int64_t slack = n - windows_per_epoch_ * window;
    const auto offset = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(std::min(slack, window)) + 1));
    starts_.clear();
    for (std::int64_t i = 0; i < windows_per_epoch_; ++i) starts_.push_back(offset + i * window);
    for (std::size_t i = starts_.size() - 1; i > 0; --i)
        std::swap(starts_[i], starts_[static_cast<std::size_t>(rng.next_below(i + 1))]);
    cursor_ = 0;
}

TokenBatch BatchIterator::next() {
    if (epoch_ < 0 || cursor_ + static_cast<std::size_t>(batch_size_) > starts_.size()) begin_epoch();
    const std::int64_t window = seq_len_ + 1;
    std::vector<std::int32_t> data;
    data.reserve(static_cast<std::size_t>(batch_size_ * window));
    for (int b = 0; b < batch_size_; ++b) {
        const auto s = static_cast<std::size_t>(starts_[cursor_++]);
        data.insert(data.end(), tokens_.begin() + static_cast<std::ptrdiff_t>(s),
                    tokens_.begin() + static_cast<std::ptrdiff_t>(s + static_cast<std::size_t>(window)));
    }
    return TokenBatch(batch_size_, window, std::move(data));
}

TokenBatch sample_windows(std::span<const std::int32_t> tokens, int count, int length, std::uint64_t seed) {
    if (count <= 0 || length <= 0) throw ConfigError("window count and length must be positive");
    const auto n = static_cast<std::int64_t>(tokens.size());
    if (n < length) throw InputError("corpus shorter than one calibration window");
    RngStream rng(seed, fnv1a64("calibration-windows"));
    std::vector<std::int32_t> data;
    data.reserve(static_cast<std::size_t>(count) * static_cast<std::size_t>(length));
    for (int i = 0; i < count; ++i) {
        const auto s = static_cast<std::ptrdiff_t>(rng.next_below(static_cast<std::uint64_t>(n - length + 1)));
        data.insert(data.end(), tokens.begin() + s, tokens.begin() + s + length);
    }
    return TokenBatch(count, length, std::move(data));
}

}  // namespace miniprune
