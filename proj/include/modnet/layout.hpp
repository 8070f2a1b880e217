#pragma once

#include <array>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace modnet {

/// Module token vocabulary. Values double as decoder output ids; kEos is a
/// policy-level symbol and never appears inside a Layout.
enum class LayoutToken : int {
  Find = 0,
  Relocate,
  And,
  Or,
  Filter,
  Exist,
  Count,
  Describe,
  EqCount,
  More,
  Less,
  Compare,
};

constexpr int kNumModuleTokens = 12;
constexpr int kEosId = 12;                       // decoder vocabulary = modules + <eos>
constexpr int kStartId = 13;                     // embedding row only, never emitted
constexpr int kDecoderVocab = kNumModuleTokens + 1;

enum class OutputKind { Attention, Answer };

struct TokenInfo {
  const char* name;
  int arity;  // attention-map inputs
  OutputKind output;
  bool uses_text;
};

const TokenInfo& token_info(LayoutToken t);
const char* token_name(LayoutToken t);
std::optional<LayoutToken> token_by_name(const std::string& name);

struct TreeNode {
  LayoutToken token;
  std::vector<int> children;  // indices into the tree's node vector
};

/// A validated layout: an RPN token sequence (post-order traversal) together
/// with the equivalent syntax tree. `root` indexes `tree`; tree node i was
/// produced by tokens[i].
struct Layout {
  std::vector<LayoutToken> tokens;
  std::vector<TreeNode> tree;
  int root = -1;
};

struct LayoutError : std::runtime_error {
  enum class Kind { Underflow, AnswerConsumed, MultipleRoots, NonAnswerRoot, Empty, Parse };
  Kind kind;
  int position;
  LayoutError(Kind k, int pos, const std::string& msg)
      : std::runtime_error(msg), kind(k), position(pos) {}
};

/// Checks the RPN stack discipline and builds the syntax tree.
/// Errors: Underflow / AnswerConsumed at the offending token index,
/// MultipleRoots / NonAnswerRoot at the end of the sequence.
Layout validate_rpn(const std::vector<LayoutToken>& tokens);

/// Pure converters; rpn_to_tree accepts attention-rooted sequences too (they
/// are rejected by validate_rpn but still form well-defined trees).
std::vector<TreeNode> rpn_to_tree(const std::vector<LayoutToken>& tokens);
std::vector<LayoutToken> tree_to_rpn(const std::vector<TreeNode>& tree, int root);

/// Every token sequence accepted by validate_rpn with length <= max_len,
/// by brute-force generation and filtering. Guarded to max_len <= 12.
std::set<std::vector<LayoutToken>> enumerate_valid_layouts(int max_len);

/// Feasibility of each next symbol given a prefix: entry t < kNumModuleTokens
/// is true iff prefix+t still extends to a valid layout within max_len;
/// entry kEosId is true iff the prefix is already a complete valid layout.
std::array<bool, kDecoderVocab> feasibility_mask(const std::vector<LayoutToken>& prefix,
                                                 int max_len);

/// Function-call syntax, e.g. "exist(and(find(),relocate(find())))".
std::string layout_to_text(const Layout& layout);
std::string tokens_to_text(const std::vector<LayoutToken>& tokens);
std::vector<LayoutToken> parse_layout_text(const std::string& text);

}  // namespace modnet
