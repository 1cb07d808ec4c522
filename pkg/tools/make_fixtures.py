"""Regenerate the bundled scene fixtures in src/rtpos/fixtures/.

    python tools/make_fixtures.py
"""
from pathlib import Path

import numpy as np
import yaml

OUT = Path(__file__).resolve().parents[1] / "src" / "rtpos" / "fixtures"

CONCRETE = {"id": 0, "n": 2.4, "scattering_amplitude": 0.4, "alpha_r": 4.0}
ASPHALT = {"id": 1, "n": 2.2, "scattering_amplitude": 0.2, "alpha_r": 4.0}


def box(x0, y0, x1, y1, h, material=0):
    return {"footprint": [[x0, y0], [x1, y0], [x1, y1], [x0, y1]], "height": h, "material": material}


def rru(i, x, y, z, az, tilt=10.0):
    return {"id": i, "position": [x, y, z], "azimuth_deg": az, "tilt_deg": tilt, "rows": 4, "cols": 8}


def polyline(corners, step=1.0):
    pts = [np.array(corners[0], float)]
    for a, b in zip(corners[:-1], corners[1:]):
        a, b = np.array(a, float), np.array(b, float)
        n = int(round(np.linalg.norm(b - a) / step))
        for k in range(1, n + 1):
            pts.append(a + (b - a) * k / n)
    return [{"tti": i, "xyz": [round(float(p[0]), 6), round(float(p[1]), 6), 1.5]} for i, p in enumerate(pts)]


def dump(name, header, doc):
    text = "".join(f"# {line}\n" for line in header) + yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)
    (OUT / f"{name}.yaml").write_text(text)


def main():
    OUT.mkdir(parents=True, exist_ok=True)

    dump("two_ray_flat", [
        "Flat ground only; analytic two-ray checks.",
        "Triangles: 2 (ground).",
    ], {
        "name": "two_ray_flat",
        "carrier_frequency_hz": 3.5e9,
        "materials": [ASPHALT],
        "ground": {"extent": [-200, -200, 200, 200], "material": 1},
        "buildings": [],
        "rrus": [rru(0, -75, 0, 20, 90), rru(1, 75, 0, 20, 270), rru(2, 0, 120, 20, 180)],
        "ue_tracks": [{"id": 0, "points": polyline([(-40, -10), (40, -10)])}],
    })

    dump("mirror_wall", [
        "One long wall north of the street; single-bounce image-method checks.",
        "Triangles: 14 (ground 2 + one box building 12).",
    ], {
        "name": "mirror_wall",
        "materials": [CONCRETE, ASPHALT],
        "ground": {"extent": [-150, -150, 150, 150], "material": 1},
        "buildings": [box(-100, 20, 100, 24, 30)],
        "rrus": [rru(0, -60, 0, 12, 90)],
        "ue_tracks": [{"id": 0, "points": polyline([(0, 0), (40, 0)], 5.0)}],
    })

    dump("canyon", [
        "Street canyon: two parallel buildings around a 40 m wide street, 3 RRUs, straight UE track.",
        "RRU 0 and 1 sit on the west and east corners of the north roof and look into the street (LOS);",
        "RRU 2 sits behind the north building (NLOS, diffraction over the roof edge).",
        "Triangles: 26 (ground 2 + 2 box buildings x 12).",
        "UE track: y = -8 m, x from -50 to 50 m, 1 m per TTI, 101 TTIs.",
    ], {
        "name": "canyon",
        "materials": [CONCRETE, ASPHALT],
        "ground": {"extent": [-200, -120, 200, 120], "material": 1},
        "buildings": [box(-100, 20, 100, 40, 18), box(-100, -40, 100, -20, 22)],
        "rrus": [rru(0, -100, 21, 24, 106), rru(1, 100, 21, 24, 254), rru(2, 0, 80, 25, 180)],
        "ue_tracks": [{"id": 0, "points": polyline([(-50, -8), (50, -8)])}],
    })

    blocks = [(-100, -60), (-20, 20), (60, 100)]
    heights = [[18, 22, 15], [20, None, 24], [16, 25, 19]]
    buildings = []
    for i, (x0, x1) in enumerate(blocks):
        for j, (y0, y1) in enumerate(blocks):
            if heights[i][j] is not None:
                buildings.append(box(x0, y0, x1, y1, heights[i][j]))
    dump("block", [
        "City block: 3x3 grid of 40 m blocks with the centre block removed (8 buildings),",
        "40 m streets centred on x = +-40 and y = +-40.",
        "5 RRUs picked by a greedy LOS-coverage search over rooftop and street sites: every track point",
        "is seen in LOS by at least 2 RRUs inside the sector grid (|az| <= 55 deg, depression <= 28 deg),",
        "most by 4 or 5, and the sites are at least 60 m apart.",
        "Triangles: 98 (ground 2 + 8 box buildings x 12).",
        "UE track: east along y = -40 from x = -80 to 40, north along x = 40 to y = 40,",
        "east along y = 40 to x = 90; 1 m per TTI, two turns, 251 TTIs.",
    ], {
        "name": "block",
        "materials": [CONCRETE, ASPHALT],
        "ground": {"extent": [-180, -180, 180, 180], "material": 1},
        "buildings": buildings,
        "rrus": [rru(0, -120, -60, 25, 30), rru(1, -20, 60, 30, 155), rru(2, -60, 10, 28, 125),
                 rru(3, 50, 90, 25, 170), rru(4, 170, -20, 25, 255)],
        "ue_tracks": [{"id": 0, "points": polyline([(-80, -40), (40, -40), (40, 40), (90, 40)])}],
    })

if __name__ == "__main__":
    main()
