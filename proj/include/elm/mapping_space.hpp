#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace elm {

/// Teacher/student depth pair. Layer indices are 1-based throughout.
struct ArchPair {
    int teacher_layers = 0;
    int student_layers = 0;

    friend bool operator==(const ArchPair&, const ArchPair&) = default;
};

struct Interval {
    int lo = 0;
    int hi = 0;

    bool contains(int v) const { return lo <= v && v <= hi; }
    friend bool operator==(const Interval&, const Interval&) = default;
};

/// Per-position admissible teacher layers for a student of depth M.
///
/// Non-last position m uses offset Z_m = floor((m-1)N / 2M); code c >= 1
/// decodes to Z_m + c and code 0 is None. The last position has no None
/// slot: code c decodes to (N - 2^k + 1) + c.
class SearchSpace {
public:
    explicit SearchSpace(ArchPair arch);

    const ArchPair& arch() const { return arch_; }
    int teacher_layers() const { return arch_.teacher_layers; }
    int student_layers() const { return arch_.student_layers; }
    int bits_per_position() const { return bits_; }
    int gene_length() const { return bits_ * arch_.student_layers; }
    int codes_per_position() const { return 1 << bits_; }

    /// 0-based position index.
    const Interval& range(int position) const { return ranges_.at(position); }
    bool none_allowed(int position) const { return position + 1 < arch_.student_layers; }
    const std::vector<Interval>& ranges() const { return ranges_; }

    /// Teacher layer that code 0 (last position) or code 1 minus one (other positions) maps from.
    int code_offset(int position) const { return offsets_.at(position); }

private:
    ArchPair arch_;
    int bits_ = 0;
    std::vector<Interval> ranges_;
    std::vector<int> offsets_;
};

SearchSpace build_space(ArchPair arch);

/// (g(1), ..., g(M)); std::nullopt is None. Values outside [1, N] only arise
/// from decoding codes that fall off the admissible range.
class LayerMapping {
public:
    LayerMapping() = default;
    explicit LayerMapping(std::vector<std::optional<int>> entries) : entries_(std::move(entries)) {}

    std::size_t size() const { return entries_.size(); }
    const std::optional<int>& operator[](std::size_t i) const { return entries_[i]; }
    const std::vector<std::optional<int>>& entries() const { return entries_; }

    int distilled_count() const;

    /// "0,0,5,10" notation, None rendered as 0.
    std::string to_string() const;

    friend bool operator==(const LayerMapping&, const LayerMapping&) = default;

private:
    std::vector<std::optional<int>> entries_;
};

/// Parses "0,0,5,10". Throws std::invalid_argument on malformed text.
LayerMapping parse_mapping(std::string_view text);

/// Fixed-width binary string of k bits per student layer.
class Gene {
public:
    Gene() = default;
    /// `bits` must contain only '0' and '1'.
    explicit Gene(std::string bits);

    const std::string& bits() const { return bits_; }
    std::size_t size() const { return bits_.size(); }
    bool bit(std::size_t i) const { return bits_[i] == '1'; }
    void flip(std::size_t i) { bits_[i] = bits_[i] == '1' ? '0' : '1'; }

    /// The k-bit code at 0-based `position`.
    unsigned code(int position, int k) const;
    void set_code(int position, int k, unsigned code);

    /// "000-000-010-101" notation.
    std::string to_string(int k) const;

    friend auto operator<=>(const Gene&, const Gene&) = default;

private:
    std::string bits_;
};

/// Parses "000-000-010-101" (dashes optional). Throws std::invalid_argument.
Gene parse_gene(std::string_view text);

class InvalidMapping : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Decodes without enforcing validity. Throws std::invalid_argument on wrong length.
LayerMapping decode(const Gene& gene, const SearchSpace& space);

/// Throws InvalidMapping with a position-precise message if `mapping` is not valid.
Gene encode(const LayerMapping& mapping, const SearchSpace& space);

/// Empty when valid; otherwise a message naming the first offending 1-based position.
std::optional<std::string> validate_mapping(const LayerMapping& mapping, const SearchSpace& space);

bool is_valid(const LayerMapping& mapping, const SearchSpace& space);
bool is_valid(const Gene& gene, const SearchSpace& space);

inline constexpr std::uint64_t kDefaultEnumerationCap = 10'000'000;

class EnumerationCapExceeded : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using MappingVisitor = std::function<void(const LayerMapping&, const Gene&)>;

/// Visits every valid mapping exactly once in lexicographic gene order and
/// returns the count. Throws EnumerationCapExceeded once more than `cap`
/// mappings have been produced.
std::uint64_t enumerate_space(const SearchSpace& space, const MappingVisitor& visit,
                              std::uint64_t cap = kDefaultEnumerationCap);

std::vector<LayerMapping> enumerate_space(const SearchSpace& space,
                                          std::uint64_t cap = kDefaultEnumerationCap);

enum class Heuristic { Uniform, LastLayer, Contribution };

Heuristic parse_heuristic(std::string_view name);
std::string_view heuristic_name(Heuristic h);

/// Baseline mappings. `layer_scores` (one cosine per teacher layer) is
/// required for Contribution; lower score marks a more important layer.
/// Contribution output is not forced into the search space.
LayerMapping heuristic_mapping(Heuristic strategy, ArchPair arch,
                               std::span<const double> layer_scores = {});

}  // namespace elm
