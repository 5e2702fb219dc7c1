#include "cocoreco/connectome.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace cocoreco {

using nlohmann::json;

const AreaSpec& ConnectomeSpec::input_area() const {
    for (const auto& a : areas)
        if (a.is_input) return a;
    throw value_error("connectome: no input area");
}

namespace {

int line_of_offset(const std::string& text, std::size_t byte) {
    int line = 1;
    for (std::size_t i = 0; i < byte && i < text.size(); ++i)
        if (text[i] == '\n') ++line;
    return line;
}

void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                    const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw parse_error("connectome: unknown field '" + it.key() + "' in " + where);
}

const json& need(const json& obj, const char* field, const std::string& where) {
    auto it = obj.find(field);
    if (it == obj.end())
        throw parse_error("connectome: " + where + ": missing required field '" +
                          field + "'");
    return *it;
}

int need_int(const json& obj, const char* field, const std::string& where) {
    const json& v = need(obj, field, where);
    if (!v.is_number_integer())
        throw parse_error("connectome: " + where + ": field '" + field +
                          "' must be an integer");
    return v.get<int>();
}

bool need_bool(const json& obj, const char* field, const std::string& where) {
    const json& v = need(obj, field, where);
    if (!v.is_boolean())
        throw parse_error("connectome: " + where + ": field '" + field +
                          "' must be a boolean");
    return v.get<bool>();
}

}  // namespace

ConnectomeSpec parse_connectome(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw parse_error("connectome: syntax error at line " +
                          std::to_string(line_of_offset(text, e.byte)) + ": " +
                          e.what());
    }
    if (!doc.is_object())
        throw parse_error("connectome: document root must be an object");
    reject_unknown(doc, {"version", "areas", "edges"}, "document root");

    ConnectomeSpec spec;
    spec.version = need_int(doc, "version", "document root");
    if (spec.version != 1)
        throw parse_error("connectome: unsupported format version " +
                          std::to_string(spec.version) + " (expected 1)");

    const json& areas = need(doc, "areas", "document root");
    if (!areas.is_array())
        throw parse_error("connectome: 'areas' must be an array");
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < areas.size(); ++i) {
        const json& a = areas[i];
        std::string where = "area " + std::to_string(i);
        if (!a.is_object())
            throw parse_error("connectome: " + where + " must be an object");
        if (a.contains("name") && a["name"].is_string())
            where = "area '" + a["name"].get<std::string>() + "'";
        reject_unknown(a, {"name", "out_channels", "kernel", "stride", "padding",
                           "is_input", "cab_site"}, where);
        AreaSpec as;
        const json& nm = need(a, "name", where);
        if (!nm.is_string())
            throw parse_error("connectome: " + where + ": 'name' must be a string");
        as.name = nm.get<std::string>();
        if (!seen.insert(as.name).second)
            throw parse_error("connectome: duplicate area name '" + as.name + "'");
        as.out_channels = need_int(a, "out_channels", where);
        as.kernel = need_int(a, "kernel", where);
        as.stride = need_int(a, "stride", where);
        as.padding = need_int(a, "padding", where);
        as.is_input = need_bool(a, "is_input", where);
        as.cab_site = need_bool(a, "cab_site", where);
        spec.areas.push_back(std::move(as));
    }

    const json& edges = need(doc, "edges", "document root");
    if (!edges.is_array())
        throw parse_error("connectome: 'edges' must be an array");
    for (std::size_t i = 0; i < edges.size(); ++i) {
        const json& e = edges[i];
        std::string where = "edge " + std::to_string(i);
        if (!e.is_object())
            throw parse_error("connectome: " + where + " must be an object");
        if (e.contains("src") && e["src"].is_string() && e.contains("dst") &&
            e["dst"].is_string())
            where = "edge " + e["src"].get<std::string>() + "->" +
                    e["dst"].get<std::string>();
        reject_unknown(e, {"src", "dst", "direction", "ec_weight"}, where);
        EdgeSpec es;
        const json& src = need(e, "src", where);
        const json& dst = need(e, "dst", where);
        if (!src.is_string() || !dst.is_string())
            throw parse_error("connectome: " + where + ": 'src'/'dst' must be strings");
        es.src = src.get<std::string>();
        es.dst = dst.get<std::string>();
        const json& dir = need(e, "direction", where);
        if (!dir.is_string() ||
            (dir.get<std::string>() != "forward" && dir.get<std::string>() != "backward"))
            throw parse_error("connectome: " + where +
                              ": 'direction' must be \"forward\" or \"backward\"");
        es.direction = dir.get<std::string>() == "forward" ? EdgeDirection::forward
                                                           : EdgeDirection::backward;
        const json& w = need(e, "ec_weight", where);
        if (!w.is_number())
            throw parse_error("connectome: " + where + ": 'ec_weight' must be a number");
        es.ec_weight = w.get<double>();
        spec.edges.push_back(std::move(es));
    }
    return spec;
}

namespace {

// Forward-subgraph cycle search; returns a cycle path like "A->B->A" or "".
std::string find_forward_cycle(const ConnectomeSpec& spec) {
    std::unordered_map<std::string, std::vector<std::string>> next;
    for (const auto& e : spec.edges)
        if (e.direction == EdgeDirection::forward &&
            spec.find_area(e.src) && spec.find_area(e.dst))
            next[e.src].push_back(e.dst);
    std::unordered_map<std::string, int> state;  // 0 fresh, 1 on stack, 2 done
    std::vector<std::string> stack;
    std::string cycle;

    std::function<bool(const std::string&)> dfs = [&](const std::string& n) {
        state[n] = 1;
        stack.push_back(n);
        for (const auto& m : next[n]) {
            if (state[m] == 1) {
                auto it = std::find(stack.begin(), stack.end(), m);
                std::ostringstream os;
                for (; it != stack.end(); ++it) os << *it << "->";
                os << m;
                cycle = os.str();
                return true;
            }
            if (state[m] == 0 && dfs(m)) return true;
        }
        stack.pop_back();
        state[n] = 2;
        return false;
    };
    for (const auto& a : spec.areas)
        if (state[a.name] == 0 && dfs(a.name)) return cycle;
    return "";
}

}  // namespace

std::vector<std::string> validate_connectome(const ConnectomeSpec& spec) {
    std::vector<std::string> out;

    std::unordered_set<std::string> names;
    for (const auto& a : spec.areas)
        if (!names.insert(a.name).second)
            out.push_back("duplicate area name '" + a.name + "'");

    int inputs = 0;
    for (const auto& a : spec.areas) {
        if (a.is_input) {
            ++inputs;
            if (a.cab_site)
                out.push_back("area '" + a.name + "': cab_site is only valid on non-input areas");
        }
        if (a.out_channels < 1)
            out.push_back("area '" + a.name + "': out_channels must be positive");
        if (!a.is_input) {
            if (a.kernel < 1) out.push_back("area '" + a.name + "': kernel must be positive");
            if (a.stride < 1) out.push_back("area '" + a.name + "': stride must be positive");
            if (a.padding < 0) out.push_back("area '" + a.name + "': padding must be non-negative");
        }
    }
    if (inputs != 1)
        out.push_back("exactly one area must have is_input=true, found " +
                      std::to_string(inputs));

    std::set<std::tuple<std::string, std::string, std::string>> edge_keys;
    for (const auto& e : spec.edges) {
        if (e.src == e.dst)
            out.push_back("edge " + e.label() + ": src and dst must differ");
        if (!spec.find_area(e.src))
            out.push_back("edge " + e.label() + ": unknown area '" + e.src + "'");
        if (!spec.find_area(e.dst))
            out.push_back("edge " + e.label() + ": unknown area '" + e.dst + "'");
        if (!(e.ec_weight >= 0.0) || !std::isfinite(e.ec_weight))
            out.push_back("edge " + e.label() + ": ec_weight must be finite and >= 0, got " +
                          std::to_string(e.ec_weight));
        if (!edge_keys.insert({e.src, e.dst, to_string(e.direction)}).second)
            out.push_back("duplicate edge " + e.label() + " (" + to_string(e.direction) + ")");
        const AreaSpec* dst = spec.find_area(e.dst);
        if (dst && dst->is_input)
            out.push_back("edge " + e.label() + ": the input area cannot receive edges");
    }

    std::string cycle = find_forward_cycle(spec);
    if (!cycle.empty())
        out.push_back("forward subgraph not acyclic: cycle " + cycle);

    // reachability over forward edges from the input
    if (inputs == 1 && cycle.empty()) {
        std::unordered_map<std::string, std::vector<std::string>> next;
        for (const auto& e : spec.edges)
            if (e.direction == EdgeDirection::forward) next[e.src].push_back(e.dst);
        std::unordered_set<std::string> reached;
        std::vector<std::string> frontier{spec.input_area().name};
        reached.insert(frontier.front());
        while (!frontier.empty()) {
            std::string n = frontier.back();
            frontier.pop_back();
            for (const auto& m : next[n])
                if (reached.insert(m).second) frontier.push_back(m);
        }
        for (const auto& a : spec.areas)
            if (!a.is_input && !reached.count(a.name))
                out.push_back("area '" + a.name +
                              "' is not reachable from the input along forward edges");
    }
    return out;
}

ExecutionPlan compile_plan(const ConnectomeSpec& spec) {
    auto violations = validate_connectome(spec);
    if (!violations.empty()) {
        std::ostringstream os;
        os << "compile_plan: spec does not validate:";
        for (const auto& v : violations) os << "\n  - " << v;
        throw value_error(os.str());
    }

    ExecutionPlan plan;

    // Kahn's algorithm over forward edges, alphabetical tie-break.
    std::map<std::string, int> indeg;
    std::map<std::string, std::vector<std::string>> next;
    for (const auto& a : spec.areas) indeg[a.name] = 0;
    for (const auto& e : spec.edges)
        if (e.direction == EdgeDirection::forward) {
            next[e.src].push_back(e.dst);
            ++indeg[e.dst];
        }
    std::set<std::string> ready;
    for (const auto& [name, d] : indeg)
        if (d == 0) ready.insert(name);
    while (!ready.empty()) {
        std::string n = *ready.begin();
        ready.erase(ready.begin());
        plan.phase1.push_back(n);
        for (const auto& m : next[n])
            if (--indeg[m] == 0) ready.insert(m);
    }

    auto pos = [&](const std::string& name) {
        return static_cast<int>(std::find(plan.phase1.begin(), plan.phase1.end(), name) -
                                plan.phase1.begin());
    };

    for (const auto& e : spec.edges)
        if (e.direction == EdgeDirection::backward)
            plan.refinements.push_back({e, e.dst});
    std::sort(plan.refinements.begin(), plan.refinements.end(),
              [&](const Refinement& a, const Refinement& b) {
                  if (pos(a.target) != pos(b.target)) return pos(a.target) < pos(b.target);
                  return a.edge.src < b.edge.src;
              });

    // strictly-downstream closure of the refined areas, minus the refined
    // areas themselves (their recompute is the refinement step)
    std::unordered_set<std::string> refined;
    for (const auto& r : plan.refinements) refined.insert(r.target);
    std::unordered_set<std::string> downstream;
    std::vector<std::string> frontier(refined.begin(), refined.end());
    while (!frontier.empty()) {
        std::string n = frontier.back();
        frontier.pop_back();
        for (const auto& m : next[n])
            if (downstream.insert(m).second) frontier.push_back(m);
    }
    for (const auto& name : plan.phase1)
        if (downstream.count(name) && !refined.count(name))
            plan.phase2.push_back(name);
    return plan;
}

std::string canonical_json(const ConnectomeSpec& spec) {
    ConnectomeSpec s = spec;
    std::sort(s.areas.begin(), s.areas.end(),
              [](const AreaSpec& a, const AreaSpec& b) { return a.name < b.name; });
    std::sort(s.edges.begin(), s.edges.end(), [](const EdgeSpec& a, const EdgeSpec& b) {
        return std::tie(a.src, a.dst, a.direction) < std::tie(b.src, b.dst, b.direction);
    });
    json doc;
    doc["version"] = s.version;
    doc["areas"] = json::array();
    for (const auto& a : s.areas)
        doc["areas"].push_back({{"name", a.name},
                                {"out_channels", a.out_channels},
                                {"kernel", a.kernel},
                                {"stride", a.stride},
                                {"padding", a.padding},
                                {"is_input", a.is_input},
                                {"cab_site", a.cab_site}});
    doc["edges"] = json::array();
    for (const auto& e : s.edges)
        doc["edges"].push_back({{"src", e.src},
                                {"dst", e.dst},
                                {"direction", to_string(e.direction)},
                                {"ec_weight", e.ec_weight}});
    return doc.dump();
}

std::string spec_hash(const ConnectomeSpec& spec) {
    return hex64(fnv1a64(canonical_json(spec)));
}

const std::string& default_connectome_json() {
    static const std::string doc = R"JSON({
  "version": 1,
  "areas": [
    {"name": "retina",   "out_channels": 3,   "kernel": 1, "stride": 1, "padding": 0, "is_input": true,  "cab_site": false},
    {"name": "LGN",      "out_channels": 16,  "kernel": 3, "stride": 1, "padding": 1, "is_input": false, "cab_site": false},
    {"name": "SC",       "out_channels": 16,  "kernel": 7, "stride": 4, "padding": 3, "is_input": false, "cab_site": false},
    {"name": "PULV",     "out_channels": 16,  "kernel": 7, "stride": 2, "padding": 3, "is_input": false, "cab_site": false},
    {"name": "V1",       "out_channels": 32,  "kernel": 3, "stride": 2, "padding": 1, "is_input": false, "cab_site": true},
    {"name": "V2",       "out_channels": 64,  "kernel": 3, "stride": 2, "padding": 1, "is_input": false, "cab_site": false},
    {"name": "V4",       "out_channels": 96,  "kernel": 3, "stride": 2, "padding": 1, "is_input": false, "cab_site": false},
    {"name": "V5MT",     "out_channels": 64,  "kernel": 3, "stride": 2, "padding": 1, "is_input": false, "cab_site": false},
    {"name": "PARIETAL", "out_channels": 96,  "kernel": 3, "stride": 1, "padding": 1, "is_input": false, "cab_site": false},
    {"name": "IT",       "out_channels": 128, "kernel": 3, "stride": 1, "padding": 1, "is_input": false, "cab_site": true},
    {"name": "PFC",      "out_channels": 128, "kernel": 3, "stride": 1, "padding": 1, "is_input": false, "cab_site": true}
  ],
  "edges": [
    {"src": "retina",   "dst": "LGN",      "direction": "forward",  "ec_weight": 0.9},
    {"src": "retina",   "dst": "SC",       "direction": "forward",  "ec_weight": 0.1},
    {"src": "SC",       "dst": "PULV",     "direction": "forward",  "ec_weight": 1.0},
    {"src": "PULV",     "dst": "V4",       "direction": "forward",  "ec_weight": 1.0},
    {"src": "PULV",     "dst": "V5MT",     "direction": "forward",  "ec_weight": 1.0},
    {"src": "LGN",      "dst": "V1",       "direction": "forward",  "ec_weight": 1.0},
    {"src": "V1",       "dst": "V2",       "direction": "forward",  "ec_weight": 1.0},
    {"src": "V2",       "dst": "V4",       "direction": "forward",  "ec_weight": 1.0},
    {"src": "V4",       "dst": "IT",       "direction": "forward",  "ec_weight": 1.0},
    {"src": "IT",       "dst": "PFC",      "direction": "forward",  "ec_weight": 1.0},
    {"src": "V1",       "dst": "V4",       "direction": "forward",  "ec_weight": 1.0},
    {"src": "V1",       "dst": "PFC",      "direction": "forward",  "ec_weight": 1.0},
    {"src": "V2",       "dst": "V5MT",     "direction": "forward",  "ec_weight": 1.0},
    {"src": "V5MT",     "dst": "PARIETAL", "direction": "forward",  "ec_weight": 1.0},
    {"src": "PARIETAL", "dst": "IT",       "direction": "forward",  "ec_weight": 1.0},
    {"src": "PFC",      "dst": "IT",       "direction": "backward", "ec_weight": 1.0}
  ]
}
)JSON";
    return doc;
}

}  // namespace cocoreco
