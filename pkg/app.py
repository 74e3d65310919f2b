"""
Airway Taper Tool - Riga di Comando
===================================
Misura del tasso di rastremazione delle vie aeree da CT + segmentazione,
generazione di fantocci sintetici, simulazione di dose/dimensione voxel ed
esperimenti di riproducibilità.

Comandi:
- phantom make      fantoccio (CT, maschera, verità) da specifica JSON
- phantom calibrate tabella di correzione del bordo FWHM per PSF e spacing
- skeleton          linea centrale e percorsi da maschera + punti distali
- measure           misura completa (profili e taper) su CT + maschera
- ctsim dose|rescale|tn   simulazione dose, ricampionamento, rumore T_n
- bench ...         sweep, studio biforcazioni, tabella rumore, statistiche

Per eseguire:
1. pip install -r requirements.txt
2. python app.py measure --ct v.mhd --mask m.mhd --distal d.json --out-dir out

Codici di uscita: 0 successo, 2 argomenti non validi, 1 errore di elaborazione.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from bench import (
    BenchError, compare_groups, compare_measurements, load_config, run_bifurcation_study,
    run_dose_sweep, run_noise_table, run_scale_sweep, write_report
)
from ctsim import dose_angles, measure_Tn, rescale_mask, rescale_volume, simulate_dose
from edge_calibration import calibrate_edges, load_calibration, save_calibration
from phantom import PhantomSpec, make_phantom, save_phantom
from skeleton import extract_paths, find_trachea_start, load_points, save_paths, thin_to_centreline
from taper_engine import dump_planes, measure_airways, write_measurement
from volio import load_mask, load_volume, save_mask, save_volume

logger = logging.getLogger('airway_taper')


# =============================================================================
# COMANDI
# =============================================================================

def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"File JSON non leggibile: {path} ({e})") from e


def _run_phantom_make(args: argparse.Namespace) -> None:
    spec = PhantomSpec.from_dict(_read_json(args.spec))
    ct, mask, truth = make_phantom(spec)
    for path in save_phantom(args.out, ct, mask, truth):
        print(path)


def _run_phantom_calibrate(args: argparse.Namespace) -> None:
    spec = PhantomSpec.from_dict(_read_json(args.spec))
    calibration = calibrate_edges(spec)
    print(save_calibration(calibration, args.out))


def _run_skeleton(args: argparse.Namespace) -> None:
    mask = load_mask(args.mask)
    start = find_trachea_start(mask)
    tree = thin_to_centreline(mask, [start] + load_points(args.distal))
    paths = extract_paths(tree)
    save_paths(paths, args.out)
    print(f"{len(paths)} percorsi scritti in {args.out} (carena {tree.carina})")


def _exclusions(path: Optional[str]) -> Optional[Dict[str, List[tuple]]]:
    """Intervalli da escludere: {airway_id: [[da_mm, a_mm], ...]}."""
    if not path:
        return None
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: atteso un oggetto {{airway_id: [[da, a], ...]}}")
    return {str(k): [tuple(float(x) for x in iv) for iv in v] for k, v in data.items()}


def _run_measure(args: argparse.Namespace) -> None:
    ct = load_volume(args.ct)
    mask = load_mask(args.mask)
    calibration = load_calibration(args.calibration) if args.calibration else None
    result = measure_airways(ct, mask, load_points(args.distal), exclusions=_exclusions(args.exclude),
                             calibration=calibration)
    written = write_measurement(result, args.out_dir)
    if args.dump_planes:
        for airway_id, spline in result['splines'].items():
            dump_planes(ct, mask, spline, Path(args.out_dir) / 'planes' / airway_id)
    print(result['results_frame'].to_string(index=False))
    for path in written.values():
        logger.info("Scritto %s", path)


def _run_ctsim_dose(args: argparse.Namespace) -> None:
    v = load_volume(args.input)
    noisy = simulate_dose(v, args.lam, seed=args.seed, angles=dose_angles(args.angles),
                          calibrate=args.calibrate, workers=args.workers)
    save_volume(noisy, args.out)


def _run_ctsim_rescale(args: argparse.Namespace) -> None:
    if bool(args.mask) != bool(args.mask_out):
        raise ValueError("--mask e --mask-out vanno indicati insieme")
    save_volume(rescale_volume(load_volume(args.input), args.scale), args.out)
    if args.mask:
        save_mask(rescale_mask(load_mask(args.mask), args.scale), args.mask_out)


def _run_ctsim_tn(args: argparse.Namespace) -> None:
    print(f"T_n = {measure_Tn(load_volume(args.input), load_mask(args.trachea)):.2f} HU")


def _run_bench_sweep(args: argparse.Namespace) -> None:
    cfg = load_config(args.config)
    if args.command == 'dose':
        written = write_report(run_dose_sweep(cfg, progress=True), cfg)
        print(f"Report scritto in {written['report']}")
    elif args.command == 'scale':
        written = write_report(run_scale_sweep(cfg, progress=True), cfg)
        print(f"Report scritto in {written['report']}")
    elif args.command == 'bifurcation':
        study = run_bifurcation_study(cfg)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        study['table'].to_csv(out / 'bifurcation.csv', index=False, float_format='%.10g')
        summary = {k: v for k, v in study.items() if k != 'table'}
        (out / 'bifurcation.json').write_text(json.dumps(summary, indent=2, default=float))
        print(study['table'].to_string(index=False))
    else:
        table = run_noise_table(cfg)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / 'noise_table.csv', float_format='%.10g')
        print(table.round(1).to_string())


def _run_bench_stats(args: argparse.Namespace) -> None:
    result = compare_measurements(pd.read_csv(args.a), pd.read_csv(args.b), column=args.column)
    print(json.dumps(result, indent=2, default=float))


def _run_bench_groups(args: argparse.Namespace) -> None:
    df = pd.read_csv(args.csv)
    if args.group_col not in df or args.column not in df:
        raise BenchError(f"Colonne {args.group_col} e {args.column} richieste in {args.csv}")
    groups = sorted(df[args.group_col].dropna().unique())
    if len(groups) != 2:
        raise BenchError(f"Servono esattamente 2 gruppi in {args.group_col}, trovati {len(groups)}")
    x, y = (df.loc[df[args.group_col] == g, args.column].dropna() for g in groups)
    result = compare_groups(x, y)
    result['groups'] = [str(g) for g in groups]
    print(json.dumps(result, indent=2, default=float))


# =============================================================================
# PARSER
# =============================================================================

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Misura del tasso di rastremazione delle vie aeree.")
    parser.add_argument('--verbose', '-v', action='store_true', help="Log DEBUG e traceback completi.")
    sub = parser.add_subparsers(dest='group', required=True)

    phantom = sub.add_parser('phantom', help="Fantocci sintetici.")
    phantom_sub = phantom.add_subparsers(dest='command', required=True)
    make = phantom_sub.add_parser('make', help="Genera CT, maschera e verità da una specifica JSON.")
    make.add_argument('--spec', required=True, help="Specifica del fantoccio (JSON).")
    make.add_argument('--out', required=True, help="Prefisso dei file di output.")
    make.set_defaults(func=_run_phantom_make)
    calibrate = phantom_sub.add_parser(
        'calibrate', help="Calibra il bordo FWHM su tubi dritti con PSF, spacing e HU della specifica.")
    calibrate.add_argument('--spec', required=True, help="Specifica del fantoccio (JSON).")
    calibrate.add_argument('--out', required=True, help="File JSON della calibrazione.")
    calibrate.set_defaults(func=_run_phantom_calibrate)

    skel = sub.add_parser('skeleton', help="Linea centrale e percorsi.")
    skel.add_argument('--mask', required=True, help="Maschera vie aeree (.mhd).")
    skel.add_argument('--distal', required=True, help="Punti distali (JSON [[i, j, k], ...]).")
    skel.add_argument('--out', required=True, help="File JSON dei percorsi.")
    skel.set_defaults(func=_run_skeleton)

    measure = sub.add_parser('measure', help="Misura completa del taper.")
    measure.add_argument('--ct', required=True, help="Volume CT (.mhd).")
    measure.add_argument('--mask', required=True, help="Maschera vie aeree (.mhd).")
    measure.add_argument('--distal', required=True, help="Punti distali (JSON).")
    measure.add_argument('--out-dir', required=True, help="Cartella di output.")
    measure.add_argument('--exclude', help="Intervalli da escludere (JSON {airway_id: [[da, a], ...]}).")
    measure.add_argument('--calibration', help="Calibrazione del bordo (JSON da phantom calibrate).")
    measure.add_argument('--dump-planes', action='store_true', help="Salva i piani campionati (debug).")
    measure.set_defaults(func=_run_measure)

    ctsim = sub.add_parser('ctsim', help="Simulazione di scansioni.")
    ctsim_sub = ctsim.add_subparsers(dest='command', required=True)
    dose = ctsim_sub.add_parser('dose', help="Scansione a dose ridotta.")
    dose.add_argument('--in', dest='input', required=True, help="Volume CT di ingresso.")
    dose.add_argument('--lambda', dest='lam', type=float, required=True, help="Esponente del rumore (sigma_n = 10^lambda).")
    dose.add_argument('--seed', type=int, default=0, help="Seme del generatore.")
    dose.add_argument('--out', required=True, help="Volume CT di uscita.")
    dose.add_argument('--angles', type=int, default=1791, help="Numero di angoli di proiezione.")
    dose.add_argument('--calibrate', action='store_true', help="Scala il rumore per il numero di angoli.")
    dose.add_argument('--workers', type=int, default=1, help="Processi paralleli.")
    dose.set_defaults(func=_run_ctsim_dose)

    rescale = ctsim_sub.add_parser('rescale', help="Ricampionamento a voxel più grandi.")
    rescale.add_argument('--scale', type=float, required=True, help="Fattore di scala dello spacing (>= 1).")
    rescale.add_argument('--in', dest='input', required=True, help="Volume CT di ingresso.")
    rescale.add_argument('--out', required=True, help="Volume CT di uscita.")
    rescale.add_argument('--mask', help="Maschera da ricampionare.")
    rescale.add_argument('--mask-out', help="Maschera ricampionata.")
    rescale.set_defaults(func=_run_ctsim_rescale)

    tn = ctsim_sub.add_parser('tn', help="Rumore T_n nella trachea.")
    tn.add_argument('--in', dest='input', required=True, help="Volume CT.")
    tn.add_argument('--trachea', required=True, help="Maschera della trachea.")
    tn.set_defaults(func=_run_ctsim_tn)

    bench = sub.add_parser('bench', help="Esperimenti e statistiche.")
    bench_sub = bench.add_subparsers(dest='command', required=True)
    for name, text in (('dose', "Sweep di dose."), ('scale', "Sweep di dimensione voxel."),
                       ('bifurcation', "Studio delle biforcazioni."), ('noise-table', "Tabella del rumore T_n.")):
        p = bench_sub.add_parser(name, help=text)
        p.add_argument('--config', required=True, help="Configurazione dell'esperimento (JSON).")
        p.set_defaults(func=_run_bench_sweep)

    stats = bench_sub.add_parser('stats', help="Confronto appaiato di due tabelle di risultati.")
    stats.add_argument('--a', required=True, help="results.csv della prima misura.")
    stats.add_argument('--b', required=True, help="results.csv della seconda misura.")
    stats.add_argument('--column', default='T_per_mm', help="Colonna da confrontare.")
    stats.set_defaults(func=_run_bench_stats)

    groups = bench_sub.add_parser('groups', help="Confronto tra due popolazioni (Wilcoxon rank-sum).")
    groups.add_argument('--csv', required=True, help="Tabella con una colonna di gruppo.")
    groups.add_argument('--group-col', required=True, help="Colonna con l'etichetta del gruppo.")
    groups.add_argument('--column', default='T_per_mm', help="Colonna da confrontare.")
    groups.set_defaults(func=_run_bench_groups)
    return parser


# =============================================================================
# MAIN
# =============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    try:
        args.func(args)
    except (ValueError, TypeError, OSError, RuntimeError) as e:
        if args.verbose:
            logger.exception("Errore")
        else:
            logger.error("%s", e)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
