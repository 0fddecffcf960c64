"""How dilation buys receptive field without buying parameters.

A 3x3 kernel with dilation d covers a ((3-1)*d + 1)-wide square: dilation 2
sees what a 5x5 sees, dilation 3 what a 7x7 sees, at 9 taps instead of 25
or 49.  This is the whole premise of the multi-level dilated mixer.
"""

from rapidnet.analysis import chain_rf, composite_rf, conv_macs, layer_trf
from rapidnet.model import build_model, default_config
from rapidnet.ops import Conv2dLayer

print("kernel x dilation -> theoretical receptive field (side length)")
for k in (1, 3, 5, 7):
    row = "  ".join(f"k={k} d={d}: {layer_trf(k, d):2d}" for d in (1, 2, 3))
    print("  " + row)

print("\ncost of covering a 7x7 field on a 14x14, 64-channel feature map:")
dense = Conv2dLayer.create(64, 64, 7, padding=3)
dilated = Conv2dLayer.create(64, 64, 3, padding=3, dilation=3)
m_dense = conv_macs(dense, 14, 14)
m_dilated = conv_macs(dilated, 14, 14)
print(f"  dense 7x7        : {m_dense:>12,} MACs")
print(f"  dilated 3x3 (d=3): {m_dilated:>12,} MACs  ({m_dilated / m_dense:.3f}x, exactly 9/49)")

print("\nreceptive fields compose: r <- r + (k_eff - 1) * jump, jump <- jump * stride")
print(f"  two stacked 3x3:           {chain_rf([(3, 1, 1), (3, 1, 1)])}")
print(f"  one dilated 3x3 (d=3):     {chain_rf([(3, 3, 1)])}")
print(f"  3x3 stride 2, then 3x3:    {chain_rf([(3, 1, 2), (3, 1, 1)])}")

print("\ncomposite receptive field at the head, per variant:")
for variant in ("micro", "ti", "s", "m", "b"):
    model = build_model(default_config(variant))
    print(f"  {variant:>5}: {composite_rf(model):5d} input pixels per side")
