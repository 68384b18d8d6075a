"""Curating synthetic captures and storing the regions as shards.

We generate a handful of regions that carry a scene-classification layer and a
cloud mask next to the spectral bands, score every 384-pixel window of each
capture, keep the least cloudy high-entropy windows, pick a revisit sequence,
pair radar dates to it, and finally write and re-read a shard.

Run with ``python3 demos/01_curate_and_store.py``.
"""
import datetime as dt
import tempfile
from pathlib import Path

from geomae.curation import pair_sar_dates, rank_candidates, score_capture, select_temporal_sequence
from geomae.region_store import Timestamp, read_shard, write_shard
from geomae.synthgen import CLOUD_BAND, SCL_BAND, SynthConfig, synth_region

config = SynthConfig(seed=7, profiles=["sentinel2-scl", "sentinel1"],
                     revisits={"sentinel2-scl": (2, 2), "sentinel1": (4, 4)})
regions = [synth_region(config, f"demo-{i}") for i in range(3)]

# Window scoring: a 768x768 capture holds four 384x384 windows.
for region in regions:
    scl = region.sources["sentinel2-scl"]
    for k in range(scl.t):
        cands = score_capture(scl.data[k, SCL_BAND], scl.data[k, CLOUD_BAND], window=384)
        kept = rank_candidates(cands, k=2, cloud_max=0.3)
        summary = ", ".join(f"{c.offset} ent={c.scl_entropy:.2f} cloud={c.cloud_fraction:.2f}" for c in kept)
        print(f"{region.region_id} t={k}: {len(kept)}/{len(cands)} windows kept  {summary or '-'}")

# Temporal selection from two years of roughly weekly acquisitions.
days = [dt.date(2019, 1, 3) + dt.timedelta(days=d) for d in range(0, 730, 6)]
available = [Timestamp(d.year, d.month, d.day, 10) for d in days]
seq = select_temporal_sequence(available)
print(f"\nselected {len(seq)} dates ({seq.dense_count} dense, {seq.seasonal_count} seasonal):")
print("  " + " ".join(f"{d.year}-{d.month:02d}-{d.day:02d}" for d in seq.dates))

# Radar pairing: for each optical date take the closest radar acquisition.
radar_days = [dt.date(2018, 12, 30) + dt.timedelta(days=d) for d in range(0, 800, 12)]
radar = [Timestamp(d.year, d.month, d.day, 18) for d in radar_days]
paired = pair_sar_dates(seq.dates[:4], radar)
for s2, s1 in zip(seq.dates[:4], paired):
    print(f"  optical {s2.year}-{s2.month:02d}-{s2.day:02d} -> radar {s1.year}-{s1.month:02d}-{s1.day:02d}")

# Storage: write a shard and check the round trip.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "demo.evsh"
    size = write_shard(regions, path)
    back = read_shard(path)
    print(f"\nshard: {size / 1e6:.1f} MB, {len(back)} regions, round trip equal: {back == regions}")
