"""Static cost analysis: parameters and MACs per variant, per layer.

The analysis never runs a forward pass; it traces shapes through the block
structure and applies the textbook counting rules (conv: k*k*(Cin/g)*Cout
per output pixel; linear: in*out).  Totals land within a few percent of
the published figures for the released variants.
"""

import json

from rapidnet.analysis import count_macs, count_params, report
from rapidnet.model import build_model, default_config

PUBLISHED = {"ti": (6.6, 0.6), "s": (9.2, 0.9), "m": (17.3, 1.6), "b": (30.5, 3.4)}

print(f"{'variant':>8} {'params (M)':>12} {'published':>10} {'GMACs@224':>10} {'published':>10}")
for variant, (pub_p, pub_m) in PUBLISHED.items():
    model = build_model(default_config(variant))
    p = count_params(model) / 1e6
    g = count_macs(model, 224) / 1e9
    print(f"{variant:>8} {p:>12.2f} {pub_p:>10.1f} {g:>10.3f} {pub_m:>10.1f}")

print("\nwhere the Ti budget goes (top 10 layers by MACs):")
rep = report(default_config("ti"), 224)
for layer in sorted(rep.layers, key=lambda l: -l.macs)[:10]:
    print(f"  {layer.name:<38} {layer.macs:>13,} MACs  k={layer.k} d={layer.d} trf={layer.trf}")

print("\nmachine-readable report (truncated):")
data = rep.to_dict()
data["layers"] = data["layers"][:2] + ["..."]
print(json.dumps(data, indent=2, default=str)[:900])
