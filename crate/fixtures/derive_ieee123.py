#!/usr/bin/env python3
"""Builds ieee123_balanced.json, the 61-bus balanced radial test feeder.

Starting point is a single-phase (positive-sequence) rendering of the IEEE
123-node test feeder: per-phase spot loads are summed into one balanced load
per node, per-mile impedances are class averages over the line construction
types, and the voltage regulators, the 61-610 transformer, and all switches
are omitted (normally-closed switches collapse their endpoints, normally-open
ties disappear). Segment lengths and the load table are an approximate
reconstruction of the published feeder data, not a verbatim copy.

The feeder is then reduced to exactly 61 buses: the source node 149, the 49
DG sites, and 11 additional buses (junctions and heavy-load taps) survive;
every other node is pruned or series-merged. Pruned and merged nodes fold
their load into the nearest surviving ancestor that itself carries load or
generation, so total demand is conserved and the load-free junctions stay at
exactly zero injection, as they are in the original feeder.

Running this script regenerates the fixture byte-for-byte.
"""

import json
import math
import os

# Per-mile positive-sequence impedance (ohm) by construction class.
Z_PER_MILE = {
    "3ph": (0.3063, 0.6273),  # three-phase overhead, class average
    "2ph": (0.7538, 0.7815),  # two-phase overhead
    "1ph": (1.3425, 1.3414),  # single-phase overhead
    "ug3": (0.7982, 0.4463),  # three-phase underground cable
}

# (upstream, downstream, length_ft, class). Normally-closed switches are
# already collapsed: 152->13, 135->18, 160->60, 197->97; the regulator node
# 150 and the transformer node 610 are dropped; open ties (54-94, 151-300)
# are absent.
EDGES = [
    ("149", "1", 400, "3ph"),
    ("1", "2", 175, "1ph"),
    ("1", "3", 250, "1ph"),
    ("3", "4", 200, "1ph"),
    ("3", "5", 325, "1ph"),
    ("5", "6", 250, "1ph"),
    ("1", "7", 300, "3ph"),
    ("7", "8", 200, "3ph"),
    ("8", "12", 225, "1ph"),
    ("8", "9", 225, "1ph"),
    ("9", "14", 425, "1ph"),
    ("14", "10", 250, "1ph"),
    ("14", "11", 250, "1ph"),
    ("8", "13", 300, "3ph"),
    ("13", "34", 150, "1ph"),
    ("34", "15", 100, "1ph"),
    ("15", "16", 375, "1ph"),
    ("15", "17", 350, "1ph"),
    ("13", "18", 825, "3ph"),
    ("18", "19", 250, "1ph"),
    ("19", "20", 325, "1ph"),
    ("18", "21", 300, "3ph"),
    ("21", "22", 525, "1ph"),
    ("21", "23", 250, "3ph"),
    ("23", "24", 550, "1ph"),
    ("23", "25", 275, "3ph"),
    ("25", "26", 350, "2ph"),
    ("26", "27", 275, "2ph"),
    ("26", "31", 225, "1ph"),
    ("31", "32", 300, "1ph"),
    ("27", "33", 500, "1ph"),
    ("25", "28", 200, "3ph"),
    ("28", "29", 300, "3ph"),
    ("29", "30", 350, "3ph"),
    ("30", "250", 200, "3ph"),
    ("13", "52", 400, "3ph"),
    ("52", "53", 200, "3ph"),
    ("53", "54", 125, "3ph"),
    ("54", "55", 275, "3ph"),
    ("55", "56", 275, "3ph"),
    ("54", "57", 350, "3ph"),
    ("57", "58", 250, "1ph"),
    ("58", "59", 250, "1ph"),
    ("57", "60", 750, "3ph"),
    ("60", "61", 550, "3ph"),
    ("60", "62", 250, "ug3"),
    ("62", "63", 175, "ug3"),
    ("63", "64", 350, "ug3"),
    ("64", "65", 425, "ug3"),
    ("65", "66", 325, "ug3"),
    ("60", "67", 350, "3ph"),
    ("67", "68", 200, "1ph"),
    ("68", "69", 275, "1ph"),
    ("69", "70", 325, "1ph"),
    ("70", "71", 275, "1ph"),
    ("67", "72", 275, "3ph"),
    ("72", "73", 275, "1ph"),
    ("73", "74", 350, "1ph"),
    ("74", "75", 400, "1ph"),
    ("72", "76", 200, "3ph"),
    ("76", "77", 400, "3ph"),
    ("77", "78", 100, "3ph"),
    ("78", "79", 225, "3ph"),
    ("78", "80", 475, "3ph"),
    ("80", "81", 475, "3ph"),
    ("81", "82", 250, "3ph"),
    ("82", "83", 250, "1ph"),
    ("81", "84", 675, "1ph"),
    ("84", "85", 475, "1ph"),
    ("76", "86", 700, "3ph"),
    ("86", "87", 450, "3ph"),
    ("87", "88", 175, "1ph"),
    ("87", "89", 275, "3ph"),
    ("89", "90", 225, "1ph"),
    ("89", "91", 225, "3ph"),
    ("91", "92", 300, "1ph"),
    ("91", "93", 225, "3ph"),
    ("93", "94", 275, "1ph"),
    ("93", "95", 250, "3ph"),
    ("95", "96", 200, "1ph"),
    ("67", "97", 250, "3ph"),
    ("97", "98", 275, "3ph"),
    ("98", "99", 550, "3ph"),
    ("99", "100", 300, "3ph"),
    ("100", "450", 800, "3ph"),
    ("97", "101", 250, "3ph"),
    ("101", "102", 225, "1ph"),
    ("102", "103", 325, "1ph"),
    ("103", "104", 700, "1ph"),
    ("101", "105", 275, "3ph"),
    ("105", "106", 225, "1ph"),
    ("106", "107", 575, "1ph"),
    ("105", "108", 325, "3ph"),
    ("108", "109", 450, "1ph"),
    ("109", "110", 300, "1ph"),
    ("110", "111", 575, "1ph"),
    ("110", "112", 125, "1ph"),
    ("112", "113", 525, "1ph"),
    ("113", "114", 325, "1ph"),
    ("108", "300", 1000, "3ph"),
    ("18", "35", 375, "3ph"),
    ("35", "36", 650, "2ph"),
    ("36", "37", 300, "1ph"),
    ("36", "38", 250, "1ph"),
    ("38", "39", 325, "1ph"),
    ("35", "40", 250, "3ph"),
    ("40", "41", 325, "1ph"),
    ("40", "42", 250, "3ph"),
    ("42", "43", 500, "1ph"),
    ("42", "44", 200, "3ph"),
    ("44", "45", 200, "1ph"),
    ("45", "46", 300, "1ph"),
    ("44", "47", 250, "3ph"),
    ("47", "48", 150, "3ph"),
    ("47", "49", 250, "3ph"),
    ("49", "50", 250, "3ph"),
    ("50", "51", 250, "3ph"),
    ("51", "151", 500, "3ph"),
]

# Balanced spot loads (kW, kvar), phases summed.
LOADS = {
    "1": (40, 20), "2": (20, 10), "4": (40, 20), "5": (20, 10), "6": (40, 20),
    "7": (20, 10), "9": (40, 20), "10": (20, 10), "11": (40, 20), "12": (20, 10),
    "16": (40, 20), "17": (20, 10), "19": (40, 20), "20": (40, 20), "22": (40, 20),
    "24": (40, 20), "28": (40, 20), "29": (40, 20), "30": (40, 20), "31": (20, 10),
    "32": (20, 10), "33": (40, 20), "34": (40, 20), "35": (40, 20), "37": (40, 20),
    "38": (20, 10), "39": (20, 10), "41": (20, 10), "42": (20, 10), "43": (40, 20),
    "45": (20, 10), "46": (20, 10), "47": (105, 75), "48": (210, 150), "49": (140, 95),
    "50": (40, 20), "51": (20, 10), "52": (40, 20), "53": (40, 20), "55": (20, 10),
    "56": (20, 10), "58": (20, 10), "59": (20, 10), "60": (20, 10), "62": (40, 20),
    "63": (40, 20), "64": (75, 35), "65": (140, 100), "66": (75, 35), "68": (20, 10),
    "69": (40, 20), "70": (20, 10), "71": (40, 20), "73": (40, 20), "74": (40, 20),
    "75": (40, 20), "76": (245, 180), "77": (40, 20), "79": (40, 20), "80": (40, 20),
    "82": (40, 20), "83": (20, 10), "84": (20, 10), "85": (40, 20), "86": (20, 10),
    "87": (40, 20), "88": (40, 20), "90": (40, 20), "92": (40, 20), "94": (40, 20),
    "95": (20, 10), "96": (20, 10), "98": (40, 20), "99": (40, 20), "100": (40, 20),
    "102": (20, 10), "103": (40, 20), "104": (40, 20), "106": (40, 20), "107": (40, 20),
    "109": (40, 20), "111": (20, 10), "112": (20, 10), "113": (40, 20), "114": (20, 10),
}

# DG capacity (kW) per surviving generation bus.
DG = {
    "1": 40, "13": 10, "23": 40, "25": 20, "28": 10, "29": 10, "30": 10,
    "35": 20, "40": 10, "42": 40, "44": 10, "47": 30, "48": 20, "50": 10,
    "51": 50, "53": 20, "54": 30, "55": 30, "56": 10, "57": 20, "60": 20,
    "61": 20, "62": 20, "63": 30, "64": 10, "65": 50, "66": 40, "67": 40,
    "72": 10, "76": 10, "78": 40, "79": 30, "80": 30, "86": 50, "87": 20,
    "89": 10, "91": 30, "93": 40, "95": 20, "97": 10, "98": 30, "99": 20,
    "100": 40, "105": 30, "108": 40, "151": 30, "250": 10, "300": 10, "450": 10,
}

SOURCE = "149"
# Buses kept besides the source and the DG sites: the load-free junctions
# 8, 18, 21, 101 (which stay at exactly zero injection, as in the original
# feeder) plus heavy-load taps spread over the feeder.
EXTRA_KEEP = {"7", "8", "18", "21", "34", "45", "58", "68", "73", "77", "101"}

BASE_MVA = 5.0
BASE_KV = 4.16


def build_tree():
    children = {}
    parent = {}
    edge_data = {}
    for up, down, length, cls in EDGES:
        children.setdefault(up, []).append(down)
        children.setdefault(down, [])
        assert down not in parent, f"node {down} has two parents"
        parent[down] = up
        edge_data[(up, down)] = (length, cls)
    nodes = set(children)
    assert len(EDGES) == len(nodes) - 1, (len(EDGES), len(nodes))
    return nodes, children, parent, edge_data


def main():
    nodes, children, parent, edge_data = build_tree()
    keep = {SOURCE} | set(DG) | EXTRA_KEEP
    missing = keep - nodes
    assert not missing, f"kept buses absent from the feeder: {sorted(missing)}"

    # Survivors: kept buses plus any ancestor with two or more kept-bearing
    # branches (true junctions). Everything else is pruned or merged away.
    def ancestors(node):
        while node != SOURCE:
            node = parent[node]
            yield node

    on_path = set(keep)
    for k in keep:
        on_path.update(ancestors(k))

    def kept_branches(node):
        return [c for c in children[node] if c in on_path]

    survivors = set(keep)
    for node in on_path:
        if node not in keep and len(kept_branches(node)) >= 2:
            survivors.add(node)

    # Fold every non-surviving load into the nearest surviving ancestor that
    # already carries load or generation, so the load-free junction buses stay
    # at exactly zero injection.  Fall back to the nearest survivor if no such
    # ancestor exists on the path to the source.
    def injection_bearing(bus):
        return bus in LOADS or DG.get(bus, 0) > 0

    folded = {node: list(LOADS.get(node, (0, 0))) for node in survivors}
    for node in sorted(nodes - survivors):
        p, q = LOADS.get(node, (0, 0))
        if p == 0 and q == 0:
            continue
        up = node
        nearest = None
        target = None
        while up != SOURCE:
            up = parent[up]
            if up in survivors:
                if nearest is None:
                    nearest = up
                if injection_bearing(up):
                    target = up
                    break
        folded[target or nearest or SOURCE][0] += p
        folded[target or nearest or SOURCE][1] += q
    assert sum(p for p, _ in folded.values()) == sum(p for p, _ in LOADS.values())

    # Series-merge the path between each survivor and its nearest surviving
    # ancestor, summing per-segment impedances.
    lines = []
    for node in sorted(survivors - {SOURCE}, key=lambda s: (len(s), s)):
        r_ohm = 0.0
        x_ohm = 0.0
        down = node
        up = parent[node]
        while True:
            length, cls = edge_data[(up, down)]
            zr, zx = Z_PER_MILE[cls]
            r_ohm += zr * length / 5280.0
            x_ohm += zx * length / 5280.0
            if up in survivors:
                break
            down = up
            up = parent[up]
        lines.append((up, node, round(r_ohm, 6), round(x_ohm, 6)))

    assert len(survivors) == 61, f"expected 61 buses, got {len(survivors)}"
    assert len(lines) == 60, f"expected 60 lines, got {len(lines)}"
    assert sum(1 for b in survivors if DG.get(b, 0) > 0) == 49

    def bus_key(b):
        return (len(b), b)

    buses = []
    for b in sorted(survivors, key=bus_key):
        p, q = folded[b]
        buses.append({
            "id": b,
            "kind": "slack" if b == SOURCE else "pq",
            "load_p_kw": float(p),
            "load_q_kvar": float(q),
            "dg_p_kw": float(DG.get(b, 0)),
        })
    lines_json = [
        {"id": f"{up}-{down}", "from": up, "to": down, "r_ohm": r, "x_ohm": x}
        for up, down, r, x in sorted(lines, key=lambda l: (bus_key(l[0]), bus_key(l[1])))
    ]
    doc = {
        "base_mva": BASE_MVA,
        "base_kv": BASE_KV,
        "buses": buses,
        "lines": lines_json,
    }

    sanity(doc)

    out = os.path.join(os.path.dirname(__file__), "ieee123_balanced.json")
    with open(out, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    total_p = sum(b["load_p_kw"] for b in buses)
    total_q = sum(b["load_q_kvar"] for b in buses)
    total_dg = sum(b["dg_p_kw"] for b in buses)
    print(f"wrote {out}: 61 buses, 60 lines, "
          f"{total_p:.0f} kW + j{total_q:.0f} kvar load, {total_dg:.0f} kW DG")


def sanity(doc):
    """Backward/forward sweep at nominal load, no DG; checks convergence."""
    s_base_kw = doc["base_mva"] * 1000.0
    z_base = BASE_KV * BASE_KV / doc["base_mva"]
    parent = {}
    z = {}
    for line in doc["lines"]:
        parent[line["to"]] = line["from"]
        z[line["to"]] = (line["r_ohm"] / z_base, line["x_ohm"] / z_base)
    load = {b["id"]: (b["load_p_kw"] / s_base_kw, b["load_q_kvar"] / s_base_kw)
            for b in doc["buses"]}
    order = [SOURCE]
    remaining = {b["id"] for b in doc["buses"]} - {SOURCE}
    while remaining:
        added = {b for b in remaining if parent[b] in order}
        assert added, "disconnected"
        order.extend(sorted(added))
        remaining -= added
    v_sq = {b: 1.0 for b in order}
    for _ in range(100):
        send = {}
        agg = {b: list(load[b]) for b in order}
        for b in reversed(order[1:]):
            p, q = agg[b]
            r, x = z[b]
            ell = (p * p + q * q) / v_sq[b]
            send[b] = (p + r * ell, q + x * ell, ell)
            agg[parent[b]][0] += send[b][0]
            agg[parent[b]][1] += send[b][1]
        worst = 0.0
        for b in order[1:]:
            r, x = z[b]
            sp, sq, ell = send[b]
            v_new = v_sq[parent[b]] - 2 * (r * sp + x * sq) + (r * r + x * x) * ell
            assert v_new > 0, f"voltage collapse at {b}"
            worst = max(worst, abs(math.sqrt(v_new) - math.sqrt(v_sq[b])))
            v_sq[b] = v_new
        if worst < 1e-12:
            break
    assert worst < 1e-12, "sweep did not converge"
    vmin = math.sqrt(min(v_sq.values()))
    vmin_bus = min(v_sq, key=v_sq.get)
    slack_p = agg[SOURCE][0]
    demand = sum(p for p, _ in load.values())
    print(f"sanity: min |v| = {vmin:.4f} pu at bus {vmin_bus}, "
          f"losses = {(slack_p - demand) * s_base_kw:.1f} kW at nominal load")
    assert vmin > 0.90, f"feeder too heavily loaded: min |v| = {vmin:.4f}"


if __name__ == "__main__":
    main()
