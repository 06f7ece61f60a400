#pragma once

// Plan-document grammar: parser and canonical serializer for execution trees
// and monitor declarations. A document is one (tree ...) form followed by any
// number of (monitor ...) forms:
//
//   document  := tree monitor* ;
//   tree      := "(" "tree" string ":tau" number node ")" ;
//   node      := atom | comp | iff | jump | exit ;
//   atom      := "(" "atom" ident string param* ")" ;
//   comp      := "(" "comp" ident string param* node+ ")" ;
//   iff       := "(" "if" ident string arm+ ":default" ident ")" ;
//   arm       := "(" "arm" pred ident ")" ;
//   jump      := "(" "jump" ident string ":to" ident ")" ;
//   exit      := "(" "exit" ident string ")" ;
//   param     := ":" ident value ;
//   pred      := "(" predop path value? ")" ;
//   predop    := "<"|"<="|"="|">="|">"|"!="|"exists"|"absent"|"moved-beyond" ;
//   monitor   := "(" "monitor" ident ":watch" path ":pred" pred ":handler" node ")" ;
//   value     := number | string | bool | vec3 ;
//   vec3      := "(" number number number ")" ;
//   path      := ident ("." ident)* ;
//
// Two engine-side extensions beyond what planners are expected to emit:
// node ids may be dotted ("p3.regrasp") so patched trees stay serializable,
// and a monitor predicate may omit its path, which then defaults to the
// monitor's :watch path. Parsing is total: any byte input yields either a
// document or a diagnostic, never a crash.

#include <charconv>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tasktree/core.hpp"

namespace tasktree {

struct SourceText {
    enum class Origin { scripted_planner, remote_planner, file };
    std::string text;
    Origin origin = Origin::file;
};

struct Diagnostic {
    enum class Severity { error, warning };
    int line = 1;
    int column = 1;
    std::string message;
    Severity severity = Severity::error;

    std::string str() const {
        return std::to_string(line) + ":" + std::to_string(column) + ": " +
               (severity == Severity::error ? "error: " : "warning: ") + message;
    }
};

// Declarative tier-1 monitor: watch one metadata path, fire a predicate, and
// hand the engine a repair fragment when it matches.
struct MonitorSpec {
    std::string id;
    std::string watch;
    Predicate pred;
    ExecutionTree handler;
    double cooldown = 2.0;

    friend bool operator==(const MonitorSpec&, const MonitorSpec&) = default;
};

struct PlanDocument {
    ExecutionTree tree;
    std::vector<MonitorSpec> monitors;

    friend bool operator==(const PlanDocument&, const PlanDocument&) = default;
};

struct ParseResult {
    std::optional<PlanDocument> doc;
    std::vector<Diagnostic> diagnostics;  // first error aborts; warnings accumulate

    bool ok() const { return doc.has_value(); }
    const Diagnostic& first_error() const {
        for (const Diagnostic& d : diagnostics) {
            if (d.severity == Diagnostic::Severity::error) {
                return d;
            }
        }
        static const Diagnostic none{0, 0, "no error", Diagnostic::Severity::error};
        return none;
    }
};

namespace dsl_detail {

enum class TokKind { LParen, RParen, Str, Num, Ident, Keyword, Op, End, Bad };

struct Token {
    TokKind kind = TokKind::End;
    std::string text;   // ident/keyword/op text, or decoded string payload
    double number = 0;  // Num only
    int line = 1;
    int col = 1;
};

inline bool ident_start(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
}
inline bool ident_char(char c) {
    return ident_start(c) || (c >= '0' && c <= '9') || c == '-';
}

class Lexer {
public:
    explicit Lexer(std::string_view src) : src_(src) {}

    Token next() {
        skip_ws();
        Token t;
        t.line = line_;
        t.col = col_;
        if (pos_ >= src_.size()) {
            t.kind = TokKind::End;
            return t;
        }
        char c = src_[pos_];
        if (c == '(') {
            advance();
            t.kind = TokKind::LParen;
            return t;
        }
        if (c == ')') {
            advance();
            t.kind = TokKind::RParen;
            return t;
        }
        if (c == '"') {
            return lex_string(t);
        }
        if (c == ':') {
            advance();
            if (pos_ >= src_.size() || !ident_start(src_[pos_])) {
                t.kind = TokKind::Bad;
                t.text = "expected identifier after ':'";
                return t;
            }
            t.kind = TokKind::Keyword;
            t.text = lex_ident_text();
            return t;
        }
        if (c == '<' || c == '>' || c == '=' || c == '!') {
            advance();
            std::string op(1, c);
            if ((c == '<' || c == '>' || c == '!') && pos_ < src_.size() && src_[pos_] == '=') {
                advance();
                op += '=';
            }
            if (op == "!") {
                t.kind = TokKind::Bad;
                t.text = "stray '!'";
                return t;
            }
            t.kind = TokKind::Op;
            t.text = op;
            return t;
        }
        if ((c >= '0' && c <= '9') || c == '-' || c == '+' || c == '.') {
            return lex_number(t);
        }
        if (ident_start(c)) {
            t.text = lex_ident_text();
            // dotted segments: ident ("." ident)* — shared by paths and
            // engine-namespaced node ids
            while (pos_ + 1 < src_.size() && src_[pos_] == '.' && ident_start(src_[pos_ + 1])) {
                advance();  // '.'
                t.text += '.';
                t.text += lex_ident_text();
            }
            t.kind = TokKind::Ident;
            return t;
        }
        t.kind = TokKind::Bad;
        t.text = std::string("unexpected byte 0x") + hex(c);
        advance();
        return t;
    }

private:
    static std::string hex(char c) {
        static const char* digits = "0123456789abcdef";
        unsigned char u = static_cast<unsigned char>(c);
        return std::string{digits[u >> 4], digits[u & 0xf]};
    }

    void advance() {
        if (pos_ < src_.size()) {
            if (src_[pos_] == '\n') {
                ++line_;
                col_ = 1;
            } else {
                ++col_;
            }
            ++pos_;
        }
    }

    void skip_ws() {
        while (pos_ < src_.size()) {
            char c = src_[pos_];
            if (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v') {
                advance();
            } else {
                break;
            }
        }
    }

    std::string lex_ident_text() {
        std::string out;
        while (pos_ < src_.size() && ident_char(src_[pos_])) {
            out += src_[pos_];
            advance();
        }
        return out;
    }

    Token& lex_string(Token& t) {
        advance();  // opening quote
        std::string out;
        while (pos_ < src_.size()) {
            char c = src_[pos_];
            if (c == '"') {
                advance();
                t.kind = TokKind::Str;
                t.text = std::move(out);
                return t;
            }
            if (c == '\\') {
                advance();
                if (pos_ >= src_.size()) {
                    break;
                }
                char e = src_[pos_];
                advance();
                switch (e) {
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    case 'r': out += '\r'; break;
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    default:
                        t.kind = TokKind::Bad;
                        t.text = std::string("unknown escape '\\") + e + "'";
                        return t;
                }
                continue;
            }
            out += c;
            advance();
        }
        t.kind = TokKind::Bad;
        t.text = "unterminated string";
        return t;
    }

    Token& lex_number(Token& t) {
        std::size_t start = pos_;
        if (src_[pos_] == '-' || src_[pos_] == '+') {
            advance();
        }
        std::size_t digits = 0;
        while (pos_ < src_.size() && src_[pos_] >= '0' && src_[pos_] <= '9') {
            advance();
            ++digits;
        }
        if (pos_ < src_.size() && src_[pos_] == '.') {
            advance();
            while (pos_ < src_.size() && src_[pos_] >= '0' && src_[pos_] <= '9') {
                advance();
                ++digits;
            }
        }
        if (digits == 0) {
            t.kind = TokKind::Bad;
            t.text = "malformed number";
            return t;
        }
        if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
            advance();
            if (pos_ < src_.size() && (src_[pos_] == '-' || src_[pos_] == '+')) {
                advance();
            }
            std::size_t exp_digits = 0;
            while (pos_ < src_.size() && src_[pos_] >= '0' && src_[pos_] <= '9') {
                advance();
                ++exp_digits;
            }
            if (exp_digits == 0) {
                t.kind = TokKind::Bad;
                t.text = "malformed exponent";
                return t;
            }
        }
        if (pos_ < src_.size() && (ident_start(src_[pos_]) || src_[pos_] == '.')) {
            t.kind = TokKind::Bad;
            t.text = "malformed number";
            return t;
        }
        std::string_view span = src_.substr(start, pos_ - start);
        double value = 0;
        auto [ptr, ec] = std::from_chars(span.data(), span.data() + span.size(), value);
        if (ec != std::errc() || ptr != span.data() + span.size()) {
            t.kind = TokKind::Bad;
            t.text = "unparseable number";
            return t;
        }
        t.kind = TokKind::Num;
        t.number = value;
        return t;
    }

    std::string_view src_;
    std::size_t pos_ = 0;
    int line_ = 1;
    int col_ = 1;
};

struct ParseFail {
    Diagnostic diag;
};

class Parser {
public:
    explicit Parser(std::string_view src) : lexer_(src) { bump(); }

    PlanDocument parse_document() {
        PlanDocument doc;
        doc.tree = parse_tree();
        while (cur_.kind != TokKind::End) {
            doc.monitors.push_back(parse_monitor());
        }
        semantic_check(doc);
        return doc;
    }

    // Lenient monitor entry point: a full document (tree skipped) or a bare
    // run of monitor forms.
    std::vector<MonitorSpec> parse_monitors_only() {
        std::vector<MonitorSpec> monitors;
        if (cur_.kind == TokKind::End) {
            return monitors;
        }
        if (peek_head() == "tree") {
            PlanDocument doc = parse_document();
            return doc.monitors;
        }
        while (cur_.kind != TokKind::End) {
            monitors.push_back(parse_monitor());
        }
        for (MonitorSpec& m : monitors) {
            check_monitor(m);
        }
        return monitors;
    }

    std::vector<Diagnostic> warnings;

private:
    [[noreturn]] void fail(const Token& at, std::string message) {
        throw ParseFail{Diagnostic{at.line, at.col, std::move(message), Diagnostic::Severity::error}};
    }

    void bump() {
        cur_ = lexer_.next();
        if (cur_.kind == TokKind::Bad) {
            fail(cur_, cur_.text);
        }
    }

    Token expect(TokKind kind, const char* what) {
        if (cur_.kind != kind) {
            fail(cur_, std::string("expected ") + what + ", got '" + describe(cur_) + "'");
        }
        Token t = cur_;
        bump();
        return t;
    }

    void expect_keyword(const char* name) {
        if (cur_.kind != TokKind::Keyword || cur_.text != name) {
            fail(cur_, std::string("expected :") + name + ", got '" + describe(cur_) + "'");
        }
        bump();
    }

    static std::string describe(const Token& t) {
        switch (t.kind) {
            case TokKind::LParen: return "(";
            case TokKind::RParen: return ")";
            case TokKind::Str: return "\"" + t.text + "\"";
            case TokKind::Num: return "number";
            case TokKind::Ident: return t.text;
            case TokKind::Keyword: return ":" + t.text;
            case TokKind::Op: return t.text;
            case TokKind::End: return "end of input";
            case TokKind::Bad: return t.text;
        }
        return "?";
    }

    // Head symbol of the upcoming form, without consuming it. Only used at
    // form boundaries, so a one-token buffer suffices.
    std::string peek_head() {
        if (cur_.kind != TokKind::LParen) {
            return {};
        }
        Lexer save = lexer_;
        Token head = lexer_.next();
        lexer_ = save;
        return head.kind == TokKind::Ident ? head.text : std::string{};
    }

    ExecutionTree parse_tree() {
        Token open = expect(TokKind::LParen, "'('");
        Token head = expect(TokKind::Ident, "'tree'");
        if (head.text != "tree") {
            fail(head, "document must start with a (tree ...) form");
        }
        ExecutionTree tree;
        tree.subtask_label = expect(TokKind::Str, "tree label string").text;
        expect_keyword("tau");
        Token tau = expect(TokKind::Num, "tau number");
        tree.tau = tau.number;
        if (!(tree.tau > 0.0)) {
            fail(tau, "tau must be > 0");
        }
        NodeCollector nodes;
        tree.root = parse_node(nodes);
        expect(TokKind::RParen, "')' closing (tree ...)");
        tree.nodes = std::move(nodes.map);
        (void)open;
        return tree;
    }

    struct NodeCollector {
        std::map<std::string, TaskNode> map;
        std::map<std::string, Token> where;
    };

    std::string parse_node(NodeCollector& nodes) {
        expect(TokKind::LParen, "'(' starting a node");
        Token head = expect(TokKind::Ident, "node kind");
        NodeKind kind;
        if (head.text == "atom") {
            kind = NodeKind::Atom;
        } else if (head.text == "comp") {
            kind = NodeKind::Composite;
        } else if (head.text == "if") {
            kind = NodeKind::If;
        } else if (head.text == "jump") {
            kind = NodeKind::Jump;
        } else if (head.text == "exit") {
            kind = NodeKind::Exit;
        } else {
            fail(head, "unknown node kind '" + head.text + "'");
        }

        Token id_tok = expect(TokKind::Ident, "node identifier");
        std::string desc = expect(TokKind::Str, "node description string").text;

        TaskNode node;
        node.id = id_tok.text;
        node.kind = kind;
        node.description = std::move(desc);

        switch (kind) {
            case NodeKind::Atom:
                parse_params(node, id_tok);
                expect(TokKind::RParen, "')' closing atom");
                break;
            case NodeKind::Exit:
                expect(TokKind::RParen, "')' closing exit");
                break;
            case NodeKind::Jump: {
                expect_keyword("to");
                node.jump_target = expect(TokKind::Ident, "jump target identifier").text;
                expect(TokKind::RParen, "')' closing jump");
                break;
            }
            case NodeKind::Composite: {
                parse_params(node, id_tok);
                while (cur_.kind == TokKind::LParen) {
                    node.children.push_back(parse_node(nodes));
                }
                if (node.children.empty()) {
                    fail(cur_, "composite '" + node.id + "' requires at least one child node");
                }
                expect(TokKind::RParen, "')' closing comp");
                break;
            }
            case NodeKind::If: {
                while (cur_.kind == TokKind::LParen) {
                    node.arms.push_back(parse_arm());
                }
                if (node.arms.empty()) {
                    fail(cur_, "if '" + node.id + "' requires at least one arm");
                }
                expect_keyword("default");
                node.default_target = expect(TokKind::Ident, "default target identifier").text;
                expect(TokKind::RParen, "')' closing if");
                break;
            }
        }

        if (nodes.map.find(node.id) != nodes.map.end()) {
            fail(id_tok, "duplicate node id '" + node.id + "'");
        }
        std::string id = node.id;
        nodes.where.emplace(id, id_tok);
        node_where_.insert_or_assign(id, id_tok);
        nodes.map.emplace(id, std::move(node));
        return id;
    }

    void parse_params(TaskNode& node, const Token& id_tok) {
        while (cur_.kind == TokKind::Keyword) {
            Param p;
            p.name = cur_.text;
            Token name_tok = cur_;
            bump();
            p.value = parse_value();
            for (const Param& existing : node.params) {
                if (existing.name == p.name) {
                    fail(name_tok, "duplicate param '" + p.name + "' in node '" + node.id + "'");
                }
            }
            node.params.push_back(std::move(p));
        }
        (void)id_tok;
    }

    ParamValue parse_value() {
        switch (cur_.kind) {
            case TokKind::Num: {
                double v = cur_.number;
                bump();
                return v;
            }
            case TokKind::Str: {
                std::string s = cur_.text;
                bump();
                return s;
            }
            case TokKind::Ident: {
                if (cur_.text == "true" || cur_.text == "false") {
                    bool b = cur_.text == "true";
                    bump();
                    return b;
                }
                fail(cur_, "expected a value, got identifier '" + cur_.text + "'");
            }
            case TokKind::LParen: {
                bump();
                Token x = expect(TokKind::Num, "vec3 x");
                Token y = expect(TokKind::Num, "vec3 y");
                Token z = expect(TokKind::Num, "vec3 z");
                expect(TokKind::RParen, "')' closing vec3");
                return Vec3{x.number, y.number, z.number};
            }
            default:
                fail(cur_, "expected a value, got '" + describe(cur_) + "'");
        }
    }

    BranchArm parse_arm() {
        expect(TokKind::LParen, "'(' starting arm");
        Token head = expect(TokKind::Ident, "'arm'");
        if (head.text != "arm") {
            fail(head, "expected (arm pred target)");
        }
        BranchArm arm;
        arm.pred = parse_pred(/*default_path=*/"");
        arm.target = expect(TokKind::Ident, "arm target identifier").text;
        expect(TokKind::RParen, "')' closing arm");
        return arm;
    }

    Predicate parse_pred(const std::string& default_path) {
        expect(TokKind::LParen, "'(' starting predicate");
        Predicate pred;
        Token op_tok = cur_;
        if (cur_.kind == TokKind::Op) {
            std::string op = cur_.text;
            bump();
            if (op == "<") {
                pred.op = PredOp::Lt;
            } else if (op == "<=") {
                pred.op = PredOp::Le;
            } else if (op == "=") {
                pred.op = PredOp::Eq;
            } else if (op == ">=") {
                pred.op = PredOp::Ge;
            } else if (op == ">") {
                pred.op = PredOp::Gt;
            } else {
                pred.op = PredOp::Ne;  // !=
            }
        } else if (cur_.kind == TokKind::Ident) {
            if (cur_.text == "exists") {
                pred.op = PredOp::Exists;
            } else if (cur_.text == "absent") {
                pred.op = PredOp::Absent;
            } else if (cur_.text == "moved-beyond") {
                pred.op = PredOp::MovedBeyond;
            } else {
                fail(cur_, "unknown predicate op '" + cur_.text + "'");
            }
            bump();
        } else {
            fail(cur_, "expected predicate op");
        }

        if (cur_.kind == TokKind::Ident && cur_.text != "true" && cur_.text != "false") {
            pred.path = cur_.text;
            bump();
        } else if (!default_path.empty()) {
            pred.path = default_path;
        } else {
            fail(cur_, "predicate requires a metadata path");
        }

        if (pred_op_takes_value(pred.op)) {
            if (cur_.kind == TokKind::RParen) {
                fail(cur_, std::string("predicate '") + std::string(pred_op_name(pred.op)) + "' requires a value");
            }
            pred.rhs = parse_value();
        } else if (cur_.kind != TokKind::RParen) {
            fail(cur_, "exists/absent take no value");
        }
        expect(TokKind::RParen, "')' closing predicate");
        (void)op_tok;
        return pred;
    }

    MonitorSpec parse_monitor() {
        expect(TokKind::LParen, "'(' starting monitor");
        Token head = expect(TokKind::Ident, "'monitor'");
        if (head.text != "monitor") {
            fail(head, "expected (monitor ...) form");
        }
        MonitorSpec spec;
        spec.id = expect(TokKind::Ident, "monitor identifier").text;
        expect_keyword("watch");
        spec.watch = expect(TokKind::Ident, "watch path").text;
        expect_keyword("pred");
        spec.pred = parse_pred(/*default_path=*/spec.watch);
        expect_keyword("handler");
        NodeCollector nodes;
        Token handler_at = cur_;
        std::string handler_root = parse_node(nodes);
        spec.handler.root = handler_root;
        spec.handler.nodes = std::move(nodes.map);
        spec.handler.subtask_label = spec.id + "-handler";
        spec.handler.tau = 1.0;  // fragments carry no threshold of their own
        ValidationReport report = validate_fragment(spec.handler);
        if (!report.ok()) {
            const Violation& v = report.violations.front();
            fail(handler_at, "monitor '" + spec.id + "' handler invalid: " + v.rule + " at node '" + v.node_id + "'");
        }
        expect(TokKind::RParen, "')' closing monitor");
        return spec;
    }

    void check_monitor(MonitorSpec& m) {
        if (!path_shape_ok(m.watch)) {
            warnings.push_back({1, 1, "monitor '" + m.id + "' watch path has unknown root '" + m.watch + "'",
                                Diagnostic::Severity::warning});
        }
    }

    static bool path_shape_ok(const std::string& path) {
        return path.rfind("obj.", 0) == 0 || path.rfind("gripper.", 0) == 0 || path.rfind("env.", 0) == 0 ||
               path == "object_count" || path == "clock";
    }

    void semantic_check(PlanDocument& doc) {
        ValidationReport report = validate_tree(doc.tree);
        if (!report.ok()) {
            const Violation& v = report.violations.front();
            Token at;
            auto it = node_where_.find(v.node_id);
            if (it != node_where_.end()) {
                at = it->second;
            } else {
                at.line = 1;
                at.col = 1;
            }
            fail(at, "invalid tree: " + v.rule + " at node '" + v.node_id + "': " + v.detail);
        }
        for (MonitorSpec& m : doc.monitors) {
            check_monitor(m);
        }
    }

    Lexer lexer_;
    Token cur_;
    std::map<std::string, Token> node_where_;
};

inline std::string format_number(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) {
        return "0";
    }
    return std::string(buf, ptr);
}

inline std::string quote_string(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\r': out += "\\r"; break;
            default: out += c;
        }
    }
    out += '"';
    return out;
}

inline std::string format_value(const ParamValue& v) {
    if (const double* d = std::get_if<double>(&v)) {
        return format_number(*d);
    }
    if (const Vec3* p = std::get_if<Vec3>(&v)) {
        return "(" + format_number(p->x) + " " + format_number(p->y) + " " + format_number(p->z) + ")";
    }
    if (const bool* b = std::get_if<bool>(&v)) {
        return *b ? "true" : "false";
    }
    return quote_string(std::get<std::string>(v));
}

inline std::string format_pred(const Predicate& p) {
    std::string out = "(" + std::string(pred_op_name(p.op)) + " " + p.path;
    if (p.rhs) {
        out += " " + format_value(*p.rhs);
    }
    out += ")";
    return out;
}

inline void render_node(const ExecutionTree& tree, const std::string& id, int depth, std::string& out) {
    const TaskNode& n = tree.at(id);
    std::string indent(static_cast<std::size_t>(depth) * 2, ' ');
    out += indent;
    out += "(";
    out += node_kind_name(n.kind);
    out += " " + n.id + " " + quote_string(n.description);
    for (const Param& p : n.params) {
        out += " :" + p.name + " " + format_value(p.value);
    }
    switch (n.kind) {
        case NodeKind::Atom:
        case NodeKind::Exit:
            out += ")";
            break;
        case NodeKind::Jump:
            out += " :to " + n.jump_target + ")";
            break;
        case NodeKind::Composite:
            for (const std::string& child : n.children) {
                out += "\n";
                render_node(tree, child, depth + 1, out);
            }
            out += ")";
            break;
        case NodeKind::If: {
            std::string arm_indent(static_cast<std::size_t>(depth + 1) * 2, ' ');
            for (const BranchArm& arm : n.arms) {
                out += "\n" + arm_indent + "(arm " + format_pred(arm.pred) + " " + arm.target + ")";
            }
            out += "\n" + arm_indent + ":default " + n.default_target + ")";
            break;
        }
    }
}

}  // namespace dsl_detail

inline ParseResult parse_document(std::string_view text) {
    ParseResult result;
    try {
        dsl_detail::Parser parser(text);
        PlanDocument doc = parser.parse_document();
        result.diagnostics = parser.warnings;
        result.doc = std::move(doc);
    } catch (const dsl_detail::ParseFail& f) {
        result.diagnostics.push_back(f.diag);
    }
    return result;
}

inline ParseResult parse_document(const SourceText& src) { return parse_document(src.text); }

// Tree-only view of parse_document.
inline ParseResult parse(std::string_view text) { return parse_document(text); }

struct MonitorParseResult {
    std::optional<std::vector<MonitorSpec>> specs;
    std::vector<Diagnostic> diagnostics;
    bool ok() const { return specs.has_value(); }
};

inline MonitorParseResult parse_monitor_specs(std::string_view text) {
    MonitorParseResult result;
    try {
        dsl_detail::Parser parser(text);
        std::vector<MonitorSpec> specs = parser.parse_monitors_only();
        result.diagnostics = parser.warnings;
        result.specs = std::move(specs);
    } catch (const dsl_detail::ParseFail& f) {
        result.diagnostics.push_back(f.diag);
    }
    return result;
}

// Canonical form: stable field order, one node per line, two-space indent by
// depth. serialize . parse is the identity on valid trees, and structurally
// equal trees serialize to identical bytes.
inline std::string serialize(const ExecutionTree& tree) {
    ValidationReport report = validate_tree(tree);
    if (!report.ok()) {
        const Violation& v = report.violations.front();
        throw TreeError(TreeErrc::invalid_tree, "serialize: invalid tree: " + v.rule + " at '" + v.node_id + "'");
    }
    std::string out = "(tree " + dsl_detail::quote_string(tree.subtask_label) + " :tau " +
                      dsl_detail::format_number(tree.tau) + "\n";
    dsl_detail::render_node(tree, tree.root, 1, out);
    out += ")\n";
    return out;
}

inline std::string serialize_fragment(const ExecutionTree& fragment) {
    ValidationReport report = validate_fragment(fragment);
    if (!report.ok()) {
        const Violation& v = report.violations.front();
        throw TreeError(TreeErrc::invalid_tree, "serialize: invalid fragment: " + v.rule + " at '" + v.node_id + "'");
    }
    std::string out;
    dsl_detail::render_node(fragment, fragment.root, 1, out);
    return out;
}

inline std::string serialize_monitor(const MonitorSpec& m) {
    std::string out = "(monitor " + m.id + " :watch " + m.watch + " :pred " + dsl_detail::format_pred(m.pred) +
                      " :handler\n";
    out += serialize_fragment(m.handler);
    out += ")\n";
    return out;
}

inline std::string serialize_document(const PlanDocument& doc) {
    std::string out = serialize(doc.tree);
    for (const MonitorSpec& m : doc.monitors) {
        out += serialize_monitor(m);
    }
    return out;
}

// Source-size metrics reported by the experiment harness.
struct SourceSize {
    int node_count = 0;
    int line_count = 0;
};

inline SourceSize measure_source(const std::string& text) {
    SourceSize size;
    size.line_count = 1;
    for (char c : text) {
        if (c == '\n') {
            ++size.line_count;
        }
    }
    ParseResult parsed = parse_document(text);
    if (parsed.ok()) {
        size.node_count = static_cast<int>(parsed.doc->tree.nodes.size());
    }
    return size;
}

}  // namespace tasktree
