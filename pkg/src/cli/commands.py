# -*- coding: utf-8 -*-
"""
サブコマンドの実装

各コマンドはライブラリを呼び出して成果物と manifest.json を書き出す。
例外はそのまま送出し、終了コードへの変換は app.py が行う。
"""

import json
from dataclasses import dataclass, replace, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from cli.manifest import ManifestRecorder
from core.checkpoint import load_checkpoint
from core.data_manager import DataManager
from core.errors import ConfigError, DataError, ShapeMismatchError
from core.evaluate import evaluate, evaluate_regions, filter_reference, fusion_table
from core.experiments import (
    geographic_cross_validation, noise_floor, run_ablation, temporal_cross_validation,
)
from core.inference import (
    FUSION_METHODS, PredictionStack, fuse, measure_seam_error, per_date_spread, predict_scene,
)
from core.model import config_param_report, full_size_report
from core.preprocess import BandSubset, compute_norm_stats
from core.raster_io import HeightMap, RasterCube, export_pgm, read_cube, read_heights, write_heights
from core.report_writer import ReportWriter
from core.synthetic import generate_scene
from core.trainer import fit, split_regions
from utils.config_manager import ConfigManager
from utils.file_utils import FileUtils
from utils.logger import Logger

CROSSVAL_MODES = ("temporal", "geographic")


@dataclass
class CommandContext:
    """コマンド共通の依存"""
    config_manager: ConfigManager
    logger: Logger


def _with_seed(setup, seed: Optional[int]):
    if seed is None:
        return setup
    return replace(setup, train=replace(setup.train, seed=seed))


def _load_cubes(sources: Sequence[Path]) -> List[RasterCube]:
    """シーンディレクトリまたは .rcube ファイルの列からキューブを読む"""
    cubes: List[RasterCube] = []
    for source in sources:
        source = Path(source)
        if source.is_dir():
            cubes.extend(DataManager(source).load_cubes())
        elif source.exists():
            cubes.append(read_cube(source))
        else:
            raise DataError(f"入力が見つかりません: {source}")
    if not cubes:
        raise DataError("入力キューブがありません")
    return cubes


def cmd_synthesize(ctx: CommandContext, spec_file: Optional[Path], out_dir: Path,
                   seed: Optional[int] = None) -> Dict[str, Path]:
    """
    合成シーンを生成する

    仕様の検査は出力を作る前に行うので、不正な仕様では何も書き出さない。
    """
    spec = ctx.config_manager.load_scene_spec(spec_file)
    if seed is not None:
        spec = replace(spec, seed=seed)
        spec.validate()
    recorder = ManifestRecorder("synthesize", spec.seed, {"scene": asdict(spec)})
    if spec_file:
        recorder.add_inputs([spec_file])

    with ctx.logger.timed("シーン生成"):
        cubes, reference = generate_scene(spec)
    floor = noise_floor(cubes, reference, spec)
    info = {"scene_spec": asdict(spec), "noise_floor_mae": floor}
    written = DataManager(out_dir, create=True).save_scene(cubes, reference, info)
    recorder.add_outputs(written)
    recorder.set_result("noise_floor_mae", floor)
    manifest = recorder.finish(out_dir)
    ctx.logger.log_operation("シーン生成完了", f"{len(cubes)} 撮影日, ノイズフロア MAE={floor:.3f} m")
    return {"manifest": manifest, "reference": DataManager(out_dir).reference_path}


def cmd_stats(ctx: CommandContext, data_dir: Path, out_dir: Path, bands: str = "ALL",
              include_cloudy: bool = False, all_regions: bool = False) -> Dict[str, Path]:
    """正規化統計量を計算して norm_stats.json に書き出す"""
    subset = BandSubset.from_name(bands)
    manager = DataManager(data_dir)
    cubes = manager.load_cubes()
    masks = None
    if not all_regions:
        masks = [split_regions(cubes[0].shape)["train"]] * len(cubes)
    recorder = ManifestRecorder("stats", config={"bands": bands, "include_cloudy": include_cloudy,
                                                 "all_regions": all_regions})
    recorder.add_inputs(manager.list_cube_paths())
    stats = compute_norm_stats(cubes, subset, exclude_cloudy=not include_cloudy, pixel_masks=masks)
    path = DataManager.save_norm_stats(stats, FileUtils.ensure_directory(Path(out_dir)) / "norm_stats.json")
    recorder.add_outputs([path])
    return {"manifest": recorder.finish(out_dir), "stats": path}


def cmd_train(ctx: CommandContext, config_file: Optional[Path], data_dir: Path, out_dir: Path,
              seed: Optional[int] = None, resume: Optional[Path] = None,
              max_iterations: Optional[int] = None) -> Dict[str, Path]:
    """
    学習して最良チェックポイントと損失曲線を書き出す

    Raises:
        NumericError: 発散（状態ダンプのパス付き）
    """
    setup = _with_seed(ctx.config_manager.load_train_setup(config_file), seed)
    if max_iterations is not None:
        setup = replace(setup, train=replace(setup.train, max_iterations=max_iterations))
        setup.validate()
    manager = DataManager(data_dir)
    cubes = manager.load_cubes()
    reference = manager.load_reference()
    checkpoint = load_checkpoint(resume) if resume else None

    recorder = ManifestRecorder("train", setup.train.seed, setup.to_dict())
    recorder.add_inputs([manager.data_dir] + ([resume] if resume else []))
    result, _ = fit(cubes, reference, setup, Path(out_dir), ctx.logger, checkpoint)

    outputs = [result.best_checkpoint, Path(out_dir) / "last.chkp", result.curve_path]
    recorder.add_outputs(outputs)
    recorder.set_result("best_val_loss", result.best_val_loss)
    recorder.set_result("best_iteration", result.state.best_iteration)
    recorder.set_result("iteration", result.state.iteration)
    recorder.set_result("param_count", result.best_model.count_params())
    return {"manifest": recorder.finish(out_dir), "checkpoint": result.best_checkpoint,
            "curve": result.curve_path}


def cmd_predict(ctx: CommandContext, checkpoint: Path, sources: Sequence[Path], out_dir: Path,
                fuse_method: Optional[str] = None, overlap: Optional[int] = None,
                bands: Optional[str] = None, preset: Optional[str] = None,
                tile_size: Optional[int] = None, pgm: bool = False,
                seam_check: bool = False) -> Dict[str, Path]:
    """
    撮影日ごとの樹高マップ（と融合マップ）を書き出す

    seam_check ならタイル推論と全画像推論の差を撮影日ごとに seam.csv へ書き出す。

    Raises:
        ShapeMismatchError: --bands がチェックポイントのバンド構成と違う
    """
    if fuse_method is not None and fuse_method not in FUSION_METHODS:
        raise ConfigError(f"未知の融合方式です: {fuse_method}")
    config = ctx.config_manager.get_inference_config(preset, overlap=overlap, tile_size=tile_size)
    loaded = load_checkpoint(checkpoint)
    model = loaded.model
    if model.norm_stats is None:
        raise DataError(f"チェックポイントに正規化統計量がありません: {checkpoint}")
    model_subset = BandSubset.from_bands(model.norm_stats.band_ids)
    if bands is not None and BandSubset.from_name(bands).band_ids != model_subset.band_ids:
        raise ShapeMismatchError(f"--bands {bands} がチェックポイントのバンド構成 {model_subset.name} と一致しません")
    cubes = _load_cubes(sources)

    recorder = ManifestRecorder("predict", config={"inference": asdict(config), "fuse": fuse_method,
                                                   "bands": model_subset.name, "seam_check": seam_check})
    recorder.add_inputs([checkpoint] + list(sources))
    out_dir = FileUtils.ensure_directory(Path(out_dir))
    predictions = []
    written: Dict[str, Path] = {}
    for cube in cubes:
        hmap = predict_scene(model, cube, config=config, logger=ctx.logger)
        path = out_dir / f"pred_{cube.acquisition_date}.rcube"
        write_heights(hmap, path)
        written[cube.acquisition_date] = path
        if pgm:
            export_pgm(hmap, path.with_suffix(".pgm"))
        predictions.append(hmap)
    if fuse_method:
        fused = fuse(PredictionStack.from_predictions(predictions, cubes), fuse_method)
        path = out_dir / f"fused_{fuse_method}.rcube"
        write_heights(fused, path)
        written["fused"] = path
        if pgm:
            export_pgm(fused, path.with_suffix(".pgm"))
    if seam_check:
        seams = pd.DataFrame([dict(acquisition_date=cube.acquisition_date,
                                   **asdict(measure_seam_error(model, cube, overlap=config.overlap,
                                                               tile_size=config.tile_size, config=config)))
                              for cube in cubes])
        written["seam"] = ReportWriter(out_dir).write_table("seam.csv", seams)
        recorder.set_result("seam_max_abs_error", float(seams["max_abs_error"].max()))
        recorder.set_result("seam_max_rel_error", float(seams["max_rel_error"].max()))
        recorder.set_result("seam_exact_expected", bool(seams["exact_expected"].all()))
        ctx.logger.log_metrics("タイル境界の誤差", max_abs_m=float(seams["max_abs_error"].max()),
                               overlap=config.overlap)
    recorder.add_outputs(written.values())
    written["manifest"] = recorder.finish(out_dir)
    return written


def _reference_part(ref: HeightMap, part: Optional[str]) -> HeightMap:
    """--part で指定した領域（行方向の既定の分割）だけを有効にする"""
    if part is None:
        return ref
    regions = split_regions(ref.shape)
    if part not in regions:
        raise ConfigError(f"--part は {', '.join(regions)} のいずれか: {part}")
    return ref.with_valid(regions[part])


def cmd_fuse(ctx: CommandContext, predictions: Sequence[Path], sources: Sequence[Path], out_dir: Path,
             method: str = "median", reference: Optional[Path] = None, part: Optional[str] = None,
             max_ref: Optional[float] = 40.0) -> Dict[str, Path]:
    """
    保存済みの撮影日ごとの予測を融合する（雲確率はキューブから取る）

    参照を与えると、融合方式ごとの MAE / RMSE (fusion.csv) と
    撮影日ごとの MAE とそのばらつき (per_date.csv) も書き出す。
    """
    if method not in FUSION_METHODS:
        raise ConfigError(f"未知の融合方式です: {method}")
    hmaps = [read_heights(p) for p in predictions]
    cubes = {c.acquisition_date: c for c in _load_cubes(sources)}
    matched = []
    for path, hmap in zip(predictions, hmaps):
        date = hmap.meta.get("acquisition_date")
        if date not in cubes:
            raise DataError(f"予測 {path} の撮影日 {date} に対応するキューブがありません")
        matched.append(cubes[date])
    recorder = ManifestRecorder("fuse", config={"method": method, "part": part, "max_ref": max_ref})
    recorder.add_inputs(list(predictions) + list(sources) + ([reference] if reference else []))
    stack = PredictionStack.from_predictions(hmaps, matched)
    fused = fuse(stack, method)
    path = FileUtils.ensure_directory(Path(out_dir)) / f"fused_{method}.rcube"
    write_heights(fused, path)
    outputs: Dict[str, Path] = {"fused": path}

    if reference is not None:
        ref = _reference_part(read_heights(reference), part)
        if max_ref is not None:
            ref, _ = filter_reference(ref, max_ref)
        reports = {name: evaluate(fuse(stack, name), ref, None, name=name) for name in FUSION_METHODS}
        writer = ReportWriter(out_dir)
        outputs["fusion"] = writer.write_table("fusion.csv", fusion_table({part or "all": reports}))
        recorder.set_result("fusion_mae", {name: r.mae for name, r in reports.items()})
        if len(stack) >= 2:
            spread = per_date_spread(stack, ref)
            frame = pd.DataFrame({"acquisition_date": spread.dates, "mae": spread.maes})
            outputs["per_date"] = writer.write_table("per_date.csv", frame)
            recorder.set_result("per_date_mae_mean", spread.mean)
            recorder.set_result("per_date_mae_std", spread.std)
        ctx.logger.log_metrics("融合方式の比較", **{f"{name}_mae_m": r.mae for name, r in reports.items()})
    recorder.add_outputs(outputs.values())
    outputs["manifest"] = recorder.finish(out_dir)
    return outputs


def cmd_evaluate(ctx: CommandContext, predictions: Sequence[Path], references: Sequence[Path], out_dir: Path,
                 max_ref: Optional[float] = 40.0, part: Optional[str] = None,
                 xlsx: bool = False) -> Dict[str, Path]:
    """
    予測を参照と比較して評価ファイルを書き出す

    複数の (予測, 参照) を与えると領域ごとの評価と画素をまとめた評価 (all) を出す。
    """
    if len(predictions) != len(references):
        raise ConfigError(f"--pred ({len(predictions)}) と --ref ({len(references)}) の数が一致しません")
    pairs = {}
    for pred_path, ref_path in zip(predictions, references):
        pred, ref = read_heights(pred_path), _reference_part(read_heights(ref_path), part)
        name = FileUtils.get_safe_filename(Path(pred_path).stem)
        if name in pairs:
            name = f"{name}_{len(pairs)}"
        pairs[name] = (pred, ref)

    recorder = ManifestRecorder("evaluate", config={"max_ref": max_ref, "part": part})
    recorder.add_inputs(list(predictions) + list(references))
    writer = ReportWriter(out_dir)
    outputs: Dict[str, Path] = {}
    if len(pairs) == 1:
        (name, (pred, ref)), = pairs.items()
        report = evaluate(pred, ref, max_ref, name=name)
        outputs.update(writer.write_report(report, xlsx=xlsx))
        recorder.set_result("removed_pixels", report.removed_pixels)
        recorder.set_result("mae", report.mae)
        recorder.set_result("rmse", report.rmse)
    else:
        reports = evaluate_regions(pairs, max_ref)
        for name, report in reports.items():
            if name == "all":
                continue
            for kind, path in writer.write_report(report, prefix=f"{name}_").items():
                outputs[f"{name}_{kind}"] = path
        pooled = reports["all"]
        region_summary = {name: {"mae": r.mae, "rmse": r.rmse, "n_pixels": r.n_pixels}
                          for name, r in reports.items()}
        outputs.update(writer.write_report(pooled, extra={"regions": region_summary}, xlsx=xlsx))
        recorder.set_result("removed_pixels", pooled.removed_pixels)
        recorder.set_result("mae", pooled.mae)
        recorder.set_result("rmse", pooled.rmse)
        recorder.set_result("regions", region_summary)
    recorder.add_outputs(outputs.values())
    outputs["manifest"] = recorder.finish(out_dir)
    results = recorder.manifest.results
    ctx.logger.log_metrics("評価完了", mae_m=results["mae"], rmse_m=results["rmse"])
    return outputs


def cmd_ablate(ctx: CommandContext, config_file: Optional[Path], data_dir: Path, out_dir: Path,
               seed: Optional[int] = None, variants: Optional[Sequence[str]] = None,
               max_ref: Optional[float] = 40.0, xlsx: bool = False) -> Dict[str, Path]:
    """構成ごとに学習・評価して ablation.csv を書き出す"""
    setup, configured = ctx.config_manager.load_ablation_setup(config_file)
    setup = _with_seed(setup, seed)
    variants = list(variants or configured)
    manager = DataManager(data_dir)
    cubes, reference = manager.load_cubes(), manager.load_reference()

    recorder = ManifestRecorder("ablate", setup.train.seed, dict(setup.to_dict(), variants=variants))
    recorder.add_inputs([manager.data_dir])
    table, results = run_ablation(variants, cubes, reference, setup, None, max_ref, ctx.logger)
    writer = ReportWriter(out_dir)
    outputs = {"table": writer.write_table("ablation.csv", table)}
    if xlsx:
        outputs["xlsx"] = writer.write_excel("ablation.xlsx", {"name": "ablation"}, {"ablation": table})
    recorder.add_outputs(outputs.values())
    recorder.set_result("variants", {r.name: (None if r.skipped else r.report().mae) for r in results})
    recorder.set_result("skipped", {r.name: r.reason for r in results if r.skipped})
    outputs["manifest"] = recorder.finish(out_dir)
    return outputs


def cmd_params(ctx: CommandContext, config_file: Optional[Path] = None,
               out_dir: Optional[Path] = None) -> Dict[str, object]:
    """全規模構成と設定ファイルの構成のパラメータ数の内訳を報告する"""
    full = full_size_report()
    result: Dict[str, object] = {"full_size": full.to_dict()}
    for line in full.lines():
        ctx.logger.info(line)
    if config_file is not None:
        setup = ctx.config_manager.load_train_setup(config_file)
        configured = config_param_report(setup.resolved_model())
        result["configured"] = configured.to_dict()
        ctx.logger.info(f"設定ファイルの構成: {configured.total:,} パラメータ")
    if out_dir is not None:
        recorder = ManifestRecorder("params", config={"config_file": str(config_file) if config_file else None})
        path = FileUtils.ensure_directory(Path(out_dir)) / "params.json"
        FileUtils.write_text_file(path, json.dumps(result, indent=2, sort_keys=True) + "\n")
        recorder.add_outputs([path])
        recorder.set_result("total", full.total)
        recorder.set_result("deviation", full.deviation)
        result["path"] = path
        result["manifest"] = recorder.finish(out_dir)
    return result


def cmd_crossval(ctx: CommandContext, config_file: Optional[Path], data_dir: Path, out_dir: Path,
                 seed: Optional[int] = None, max_ref: Optional[float] = 40.0,
                 mode: str = "temporal", n_folds: int = 3) -> Dict[str, Path]:
    """
    交差検証を行い crossval.csv を書き出す

    mode="temporal" は撮影日を1つずつ、mode="geographic" は列方向の領域を1つずつ除く。
    """
    if mode not in CROSSVAL_MODES:
        raise ConfigError(f"未知の交差検証モードです: {mode} (候補: {', '.join(CROSSVAL_MODES)})")
    setup = _with_seed(ctx.config_manager.load_train_setup(config_file), seed)
    manager = DataManager(data_dir)
    cubes, reference = manager.load_cubes(), manager.load_reference()
    recorder = ManifestRecorder("crossval", setup.train.seed, dict(setup.to_dict(), mode=mode, folds=n_folds))
    recorder.add_inputs([manager.data_dir])
    if mode == "geographic":
        result = geographic_cross_validation(cubes, reference, setup, n_folds, None, max_ref, ctx.logger)
    else:
        result = temporal_cross_validation(cubes, reference, setup, None, max_ref, ctx.logger)
    writer = ReportWriter(out_dir)
    outputs = {
        "folds": writer.write_table("crossval.csv", result.folds),
        "summary": writer.write_json("crossval.json", {"mode": mode, "mean_mae": result.mean_mae,
                                                       "std_mae": result.std_mae,
                                                       "n_folds": len(result.folds)}),
    }
    recorder.add_outputs(outputs.values())
    recorder.set_result("mean_mae", result.mean_mae)
    recorder.set_result("std_mae", result.std_mae)
    outputs["manifest"] = recorder.finish(out_dir)
    return outputs
