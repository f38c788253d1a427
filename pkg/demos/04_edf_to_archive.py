"""From EDF recordings to an epoch archive.

Writes a synthetic BIDS-style tree of EDF+ files, scans it, runs the
preprocessing chain and stores the epochs in the binary archive format.
"""
# %%
import tempfile
from pathlib import Path

import numpy as np

from vowelbench.epochs import EpochSet
from vowelbench.ingest import parse_header, read_archive, read_edf, scan_bids, write_archive
from vowelbench.preprocess import preprocess_recording
from vowelbench.synth import SynthSpec, label_map, make_edf_fixture

root = Path(tempfile.mkdtemp())
spec = SynthSpec(n_subjects=3, trials_per_class=4, n_channels=8, artifact_trials=(5,))
make_edf_fixture(spec, root / "bids")

# %%
subjects = scan_bids(root / "bids")
for sid, paths in subjects:
    h = parse_header(paths[0].read_bytes())
    print(sid, paths[0].name, h.n_signals, "signals,", h.n_records, "records")

# %%
# One trial carries a 500 uV spike; the +-150 uV rule drops it.
parts = [preprocess_recording(read_edf(p), label_map(), subject=sid) for sid, ps in subjects for p in ps]
epochs = EpochSet.concatenate(parts)
print(epochs.n_trials, "of", 3 * 5 * 4, "trials kept; history:", " > ".join(epochs.history))

# %%
write_archive(epochs, root / "archive", {"demo": True})
back = read_archive(root / "archive")
print("archive matches:", np.allclose(back.data, epochs.data, atol=1e-3), back.data.dtype)
