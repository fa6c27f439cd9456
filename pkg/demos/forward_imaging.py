"""Print a suite target through the Abbe model and compare with Hopkins/SOCS.

    python demos/forward_imaging.py [suite-name]
"""

import sys
import time

import numpy as np

from litho_smo.config import OpticalConfig
from litho_smo.core import activate_mask, activate_source, init_mask_params, init_source_params
from litho_smo.imaging import abbe_aerial, build_pupil, build_tcc, full_spectrum, hopkins_aerial, socs_decompose
from litho_smo.metrics import binarize, metric_epe, metric_l2
from litho_smo.imaging import resist
from litho_smo.patterns import suite_target


def main(name="l_shape"):
    cfg = OpticalConfig()
    target = suite_target(name, cfg)
    source = activate_source(init_source_params("annular", cfg), cfg)
    mask = activate_mask(init_mask_params(target, cfg), cfg)
    pupil = build_pupil(cfg)

    t0 = time.perf_counter()
    abbe = abbe_aerial(source, mask, pupil, cfg).intensity
    t_abbe = time.perf_counter() - t0

    tcc = build_tcc(source, pupil, cfg)
    spectrum = full_spectrum(tcc)
    print(f"TCC window: {tcc.entries.shape[0]} frequencies")
    for q in (1, 6, 24, 96):
        kernels = socs_decompose(tcc, q)
        img = hopkins_aerial(kernels, mask).intensity
        err = np.max(np.abs(img - abbe)) / abbe.max()
        print(f"  Q={q:3d}: energy {spectrum[:q].sum() / spectrum.sum():.4f}, max deviation from Abbe {err:.2e}")

    printed = binarize(resist(abbe, cfg), 0.5, cfg.pixel_nm)
    print(f"Abbe forward: {t_abbe * 1e3:.1f} ms")
    print(f"target-as-mask print: L2 {metric_l2(printed, target):g} nm^2, EPE violations {metric_epe(printed, target)}")
    rows = ["".join("#" if v else "." for v in row[::4]) for row in printed.pixels[::-4]]
    print("\n".join(rows))


if __name__ == "__main__":
    main(*sys.argv[1:])
