import os
import sys
from dataclasses import replace

import numpy as np

# Add project root to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from actcodec_core import settings
from actcodec_core.codec import LayerCodecConfig
from actcodec_core.harness import (
    SeparableSource,
    SyntheticSource,
    ablation_study,
    block_shape_study,
    coding_gain,
    emit_report,
    rd_sweep,
    step_grid,
    tree_balance_study,
    truncation_study,
    write_frame,
)
from actcodec_core.quant import step_for_rate_exact
from actcodec_core.tensor import BlockShape


def main():
    out_dir = os.path.join('reports')
    os.makedirs(out_dir, exist_ok=True)
    seed = settings.SEED
    print(f"Writing experiment reports to {out_dir}/ (seed {seed})")

    # --- Ablation: fixed-width vs VLC, with and without the KLT ---
    source = SyntheticSource.equicorrelated(64, 0.9, seed=seed)
    tensors = source.tensors(8, 16, 16)
    step8 = 2 * settings.CLIP_MULTIPLIER / 255
    ablation = ablation_study(tensors, 0.99 * step8)
    write_frame(ablation, os.path.join(out_dir, 'ablation.csv'))
    print("\nAblation (64-dim, rho=0.9):")
    print(ablation.to_string(index=False))

    # --- RD curves, KLT on/off ---
    steps = [step_for_rate_exact(r, 1.0) for r in (2, 3, 4, 5, 6)]
    base = LayerCodecConfig(BlockShape(1, 1, 64), step=steps[0], relu_placement='none')
    for use_klt in (True, False):
        grid = step_grid(replace(base, use_klt=use_klt), steps)
        points = rd_sweep(tensors, grid, layer='klt' if use_klt else 'identity')
        emit_report(points, os.path.join(out_dir, f"rd_{'klt' if use_klt else 'identity'}.csv"))
    print(f"\nPredicted coding gain: {coding_gain(source.cov):.4f} bits/value")

    # --- Truncation: 90% of the energy in the top quarter of components ---
    spectrum = np.concatenate([np.full(16, 4.05), np.full(48, 0.15)])
    low_rank = SyntheticSource.from_spectrum(spectrum, seed=seed).tensors(8, 16, 16)
    truncation = truncation_study(low_rank, 1.0, [64, 48, 32, 16, 8])
    write_frame(truncation, os.path.join(out_dir, 'truncation.csv'))
    print("\nTruncation:")
    print(truncation.to_string(index=False))

    # --- Block shapes at n = 64 ---
    shapes = ['1x1x64', '4x4x4', '8x8x1']
    for name, spatial, channel in (('channel', 0.0, 0.9), ('spatial', 0.9, 0.0)):
        data = SeparableSource(64, channel_rho=channel, spatial_rho=spatial, seed=seed).tensors(4, 32, 32)
        points = block_shape_study(data, shapes, 0.1)
        emit_report(points, os.path.join(out_dir, f'blocks_{name}.csv'))
        print(f"\nBlock shapes ({name}-correlated):")
        for p in points:
            print(f"  {p.layer:>7}  huffman {p.huffman_bits:.3f}  entropy {p.entropy_bits:.3f}  mse {p.mse:.2e}")

    # --- Huffman tree balance ---
    balance = tree_balance_study(tensors, 0.99 * step8)
    write_frame(balance, os.path.join(out_dir, 'tree_balance.csv'))
    print("\nTree balance:")
    print(balance.to_string(index=False))


if __name__ == '__main__':
    main()
