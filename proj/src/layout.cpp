#include "modnet/layout.hpp"

#include <algorithm>
#include <cctype>
#include <functional>

namespace modnet {

namespace {

// name / arity / output kind / uses-text, in token id order
constexpr TokenInfo kTokenTable[kNumModuleTokens] = {
    {"find", 0, OutputKind::Attention, true},
    {"relocate", 1, OutputKind::Attention, true},
    {"and", 2, OutputKind::Attention, false},
    {"or", 2, OutputKind::Attention, false},
    {"filter", 1, OutputKind::Attention, true},
    {"exist", 1, OutputKind::Answer, false},
    {"count", 1, OutputKind::Answer, false},
    {"describe", 1, OutputKind::Answer, true},
    {"eq_count", 2, OutputKind::Answer, false},
    {"more", 2, OutputKind::Answer, false},
    {"less", 2, OutputKind::Answer, false},
    {"compare", 2, OutputKind::Answer, true},
};

}  // namespace

const TokenInfo& token_info(LayoutToken t) { return kTokenTable[static_cast<int>(t)]; }
const char* token_name(LayoutToken t) { return token_info(t).name; }

std::optional<LayoutToken> token_by_name(const std::string& name) {
  for (int i = 0; i < kNumModuleTokens; ++i)
    if (name == kTokenTable[i].name) return static_cast<LayoutToken>(i);
  return std::nullopt;
}

Layout validate_rpn(const std::vector<LayoutToken>& tokens) {
  if (tokens.empty())
    throw LayoutError(LayoutError::Kind::Empty, 0, "empty layout");
  Layout out;
  out.tokens = tokens;
  std::vector<int> stack;  // indices of produced tree nodes
  for (int pos = 0; pos < static_cast<int>(tokens.size()); ++pos) {
    const TokenInfo& info = token_info(tokens[pos]);
    TreeNode node{tokens[pos], {}};
    if (static_cast<int>(stack.size()) < info.arity)
      throw LayoutError(LayoutError::Kind::Underflow, pos,
                        "stack underflow at token " + std::to_string(pos) + " (" + info.name + ")");
    for (int k = 0; k < info.arity; ++k) {
      const int child = stack[stack.size() - info.arity + k];
      if (token_info(out.tree[child].token).output == OutputKind::Answer)
        throw LayoutError(LayoutError::Kind::AnswerConsumed, pos,
                          "answer output consumed at token " + std::to_string(pos) + " (" +
                              info.name + ")");
      node.children.push_back(child);
    }
    stack.resize(stack.size() - info.arity);
    out.tree.push_back(std::move(node));
    stack.push_back(pos);
  }
  if (stack.size() != 1)
    throw LayoutError(LayoutError::Kind::MultipleRoots, static_cast<int>(tokens.size()) - 1,
                      "layout leaves " + std::to_string(stack.size()) + " roots");
  if (token_info(out.tree[stack[0]].token).output != OutputKind::Answer)
    throw LayoutError(LayoutError::Kind::NonAnswerRoot, stack[0],
                      "layout root is not an answer module");
  out.root = stack[0];
  return out;
}

std::vector<TreeNode> rpn_to_tree(const std::vector<LayoutToken>& tokens) {
  std::vector<TreeNode> tree;
  std::vector<int> stack;
  for (int pos = 0; pos < static_cast<int>(tokens.size()); ++pos) {
    const TokenInfo& info = token_info(tokens[pos]);
    if (static_cast<int>(stack.size()) < info.arity)
      throw LayoutError(LayoutError::Kind::Underflow, pos, "stack underflow");
    TreeNode node{tokens[pos], {}};
    for (int k = 0; k < info.arity; ++k) node.children.push_back(stack[stack.size() - info.arity + k]);
    stack.resize(stack.size() - info.arity);
    tree.push_back(std::move(node));
    stack.push_back(pos);
  }
  if (stack.size() != 1)
    throw LayoutError(LayoutError::Kind::MultipleRoots, static_cast<int>(tokens.size()) - 1,
                      "sequence does not form a single tree");
  return tree;
}

std::vector<LayoutToken> tree_to_rpn(const std::vector<TreeNode>& tree, int root) {
  std::vector<LayoutToken> out;
  std::function<void(int)> walk = [&](int idx) {
    for (int c : tree[idx].children) walk(c);
    out.push_back(tree[idx].token);
  };
  walk(root);
  return out;
}

namespace {

// Stack effect bookkeeping shared by the enumerator and the mask. A prefix of
// attention tokens is summarized by its stack depth; the shortest completion
// from depth s is one answer token (s <= 2) or s-2 merges plus one
// two-input answer token.
int min_completion_len(int stack_depth) {
  if (stack_depth <= 0) return 1;  // still needs a find first; caller guards
  return stack_depth <= 2 ? 1 : stack_depth - 1;
}

void enumerate_rec(std::vector<LayoutToken>& prefix, int stack_depth, int max_len,
                   std::set<std::vector<LayoutToken>>& out) {
  // complete with an answer token if possible
  for (int id = 0; id < kNumModuleTokens; ++id) {
    const TokenInfo& info = kTokenTable[id];
    if (info.output != OutputKind::Answer) continue;
    if (info.arity != stack_depth) continue;
    prefix.push_back(static_cast<LayoutToken>(id));
    out.insert(prefix);
    prefix.pop_back();
  }
  if (static_cast<int>(prefix.size()) + 1 >= max_len) return;
  for (int id = 0; id < kNumModuleTokens; ++id) {
    const TokenInfo& info = kTokenTable[id];
    if (info.output != OutputKind::Attention) continue;
    if (stack_depth < info.arity) continue;
    const int next_depth = stack_depth - info.arity + 1;
    if (static_cast<int>(prefix.size()) + 1 + min_completion_len(next_depth) > max_len) continue;
    prefix.push_back(static_cast<LayoutToken>(id));
    enumerate_rec(prefix, next_depth, max_len, out);
    prefix.pop_back();
  }
}

bool is_valid(const std::vector<LayoutToken>& tokens) {
  try {
    validate_rpn(tokens);
    return true;
  } catch (const LayoutError&) {
    return false;
  }
}

}  // namespace

std::set<std::vector<LayoutToken>> enumerate_valid_layouts(int max_len) {
  if (max_len > 12)
    throw std::invalid_argument("enumerate_valid_layouts: max_len > 12 is combinatorially unsafe");
  std::set<std::vector<LayoutToken>> out;
  if (max_len < 1) return out;
  std::vector<LayoutToken> prefix;
  enumerate_rec(prefix, 0, max_len, out);
  // generation prunes dead branches; filter as the final authority anyway
  for (auto it = out.begin(); it != out.end();) {
    if (!is_valid(*it)) it = out.erase(it);
    else ++it;
  }
  return out;
}

std::array<bool, kDecoderVocab> feasibility_mask(const std::vector<LayoutToken>& prefix,
                                                 int max_len) {
  std::array<bool, kDecoderVocab> mask{};
  // replay the prefix
  int stack_depth = 0;
  bool complete = false;
  for (size_t i = 0; i < prefix.size(); ++i) {
    const TokenInfo& info = token_info(prefix[i]);
    if (complete || stack_depth < info.arity)
      throw LayoutError(LayoutError::Kind::Underflow, static_cast<int>(i),
                        "feasibility_mask: prefix is not extendable");
    if (info.output == OutputKind::Answer) {
      if (stack_depth != info.arity) {
        // leftover attention maps could never be consumed afterwards
        throw LayoutError(LayoutError::Kind::MultipleRoots, static_cast<int>(i),
                          "feasibility_mask: prefix is a dead end");
      }
      stack_depth = 0;
      complete = true;
    } else {
      stack_depth = stack_depth - info.arity + 1;
    }
  }
  if (complete) {
    mask[kEosId] = true;  // a finished layout only closes
    return mask;
  }
  const int len = static_cast<int>(prefix.size());
  for (int id = 0; id < kNumModuleTokens; ++id) {
    const TokenInfo& info = kTokenTable[id];
    if (info.arity > stack_depth) continue;
    if (info.output == OutputKind::Answer) {
      mask[id] = info.arity == stack_depth && len + 1 <= max_len;
    } else {
      const int next_depth = stack_depth - info.arity + 1;
      mask[id] = len + 1 + min_completion_len(next_depth) <= max_len;
    }
  }
  bool any = mask[kEosId];
  for (int id = 0; id < kNumModuleTokens; ++id) any = any || mask[id];
  if (!any)
    throw LayoutError(LayoutError::Kind::Underflow, len, "feasibility_mask: prefix is a dead end");
  return mask;
}

std::string tokens_to_text(const std::vector<LayoutToken>& tokens) {
  const std::vector<TreeNode> tree = rpn_to_tree(tokens);
  std::function<std::string(int)> render = [&](int idx) {
    std::string s = token_name(tree[idx].token);
    s += "(";
    for (size_t c = 0; c < tree[idx].children.size(); ++c) {
      if (c) s += ",";
      s += render(tree[idx].children[c]);
    }
    s += ")";
    return s;
  };
  return render(static_cast<int>(tree.size()) - 1);
}

std::string layout_to_text(const Layout& layout) { return tokens_to_text(layout.tokens); }

namespace {

struct Parser {
  const std::string& text;
  size_t pos = 0;

  void skip_ws() {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  }

  [[noreturn]] void fail(const std::string& msg) {
    throw LayoutError(LayoutError::Kind::Parse, static_cast<int>(pos),
                      "layout parse error at offset " + std::to_string(pos) + ": " + msg);
  }

  void expect(char c) {
    skip_ws();
    if (pos >= text.size() || text[pos] != c) fail(std::string("expected '") + c + "'");
    ++pos;
  }

  bool peek(char c) {
    skip_ws();
    return pos < text.size() && text[pos] == c;
  }

  void parse_call(std::vector<LayoutToken>& out) {
    skip_ws();
    size_t start = pos;
    while (pos < text.size() &&
           (std::isalnum(static_cast<unsigned char>(text[pos])) || text[pos] == '_'))
      ++pos;
    if (pos == start) fail("expected module name");
    const std::string name = text.substr(start, pos - start);
    auto tok = token_by_name(name);
    if (!tok) fail("unknown module '" + name + "'");
    std::vector<std::vector<LayoutToken>> args;
    expect('(');
    if (!peek(')')) {
      while (true) {
        std::vector<LayoutToken> arg;
        parse_call(arg);
        args.push_back(std::move(arg));
        if (peek(',')) {
          ++pos;
          continue;
        }
        break;
      }
    }
    expect(')');
    if (static_cast<int>(args.size()) != token_info(*tok).arity)
      fail("module '" + name + "' takes " + std::to_string(token_info(*tok).arity) +
           " arguments, got " + std::to_string(args.size()));
    for (auto& a : args) out.insert(out.end(), a.begin(), a.end());  // post-order
    out.push_back(*tok);
  }
};

}  // namespace

std::vector<LayoutToken> parse_layout_text(const std::string& text) {
  Parser p{text};
  std::vector<LayoutToken> out;
  p.parse_call(out);
  p.skip_ws();
  if (p.pos != text.size()) p.fail("trailing characters");
  return out;
}

}  // namespace modnet
