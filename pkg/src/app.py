#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
樹高推定ツールキット - メインアプリケーション
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from cli.commands import (
    CROSSVAL_MODES, CommandContext, cmd_ablate, cmd_crossval, cmd_evaluate, cmd_fuse, cmd_params,
    cmd_predict, cmd_stats, cmd_synthesize, cmd_train,
)
from core.errors import CanopyError
from core.inference import FUSION_METHODS
from utils.config_manager import ConfigManager
from utils.logger import Logger

EXIT_OK = 0
EXIT_UNEXPECTED = 1


class CanopyHeightApp:
    """メインアプリケーションクラス"""

    def __init__(self, app_dir: Optional[Path] = None):
        """
        初期化

        Args:
            app_dir: アプリケーションディレクトリ（None なら main.py の場所）
        """
        self.app_dir = Path(app_dir) if app_dir else self._get_app_directory()
        self.config_manager: Optional[ConfigManager] = None
        self.logger: Optional[Logger] = None

    def _get_app_directory(self) -> Path:
        """アプリケーションディレクトリを取得"""
        return Path(__file__).parent.parent

    def build_parser(self) -> argparse.ArgumentParser:
        """サブコマンド付きの引数パーサーを作る"""
        parser = argparse.ArgumentParser(prog="canopy", description="Sentinel-2 樹高推定ツールキット")
        parser.add_argument("--config-dir", type=Path, default=self.app_dir / "config",
                            help="設定ファイルディレクトリ")
        parser.add_argument("--log-level", default=None, help="ログレベル（設定ファイルより優先）")
        parser.add_argument("--log-file", type=Path, default=None, help="ログファイル")
        sub = parser.add_subparsers(dest="command", required=True)

        p = sub.add_parser("synthesize", help="合成シーンを生成")
        p.add_argument("--spec", type=Path, default=None, help="シーン仕様 YAML")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int, default=None)

        p = sub.add_parser("stats", help="正規化統計量を計算")
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--bands", default="ALL")
        p.add_argument("--include-cloudy", action="store_true")
        p.add_argument("--all-regions", action="store_true")

        p = sub.add_parser("train", help="モデルを学習")
        p.add_argument("--config", type=Path, default=None, help="学習設定 YAML")
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--resume", type=Path, default=None, help="再開する last.chkp")
        p.add_argument("--max-iterations", type=int, default=None)

        p = sub.add_parser("predict", help="樹高マップを推論")
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--cubes", type=Path, nargs="+", required=True, help=".rcube またはシーンディレクトリ")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--fuse", choices=sorted(FUSION_METHODS), default=None)
        p.add_argument("--overlap", type=int, default=None)
        p.add_argument("--tile-size", type=int, default=None)
        p.add_argument("--bands", default=None)
        p.add_argument("--preset", default=None, help="tropical / temperate")
        p.add_argument("--pgm", action="store_true", help="PGM のクイックルックも書き出す")
        p.add_argument("--seam-check", action="store_true", help="タイル推論と全画像推論の差を seam.csv に書き出す")

        p = sub.add_parser("fuse", help="撮影日ごとの予測を融合")
        p.add_argument("--preds", type=Path, nargs="+", required=True)
        p.add_argument("--cubes", type=Path, nargs="+", required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--fuse", choices=sorted(FUSION_METHODS), default="median")
        p.add_argument("--ref", type=Path, default=None, help="参照（融合方式の比較と撮影日ごとのばらつきを出す）")
        p.add_argument("--part", default=None, help="train / val / test の領域だけを評価")
        p.add_argument("--max-ref", type=float, default=40.0)
        p.add_argument("--no-filter", action="store_true", help="参照の上限フィルタを使わない")

        p = sub.add_parser("evaluate", help="予測を参照と比較")
        p.add_argument("--pred", type=Path, nargs="+", required=True)
        p.add_argument("--ref", type=Path, nargs="+", required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--max-ref", type=float, default=40.0)
        p.add_argument("--no-filter", action="store_true", help="参照の上限フィルタを使わない")
        p.add_argument("--part", default=None, help="train / val / test の領域だけを評価")
        p.add_argument("--xlsx", action="store_true")

        p = sub.add_parser("ablate", help="バンド構成・カーネルのアブレーション")
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--variants", nargs="+", default=None)
        p.add_argument("--xlsx", action="store_true")

        p = sub.add_parser("params", help="パラメータ数の内訳")
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--out", type=Path, default=None)

        p = sub.add_parser("crossval", help="撮影日または領域を1つずつ除く交差検証")
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mode", choices=CROSSVAL_MODES, default="temporal",
                       help="temporal: 撮影日を除く / geographic: 列方向の領域を除く")
        p.add_argument("--folds", type=int, default=3, help="geographic の領域数")
        return parser

    def _initialize(self, args: argparse.Namespace):
        """設定管理とログを初期化"""
        self.config_manager = ConfigManager(args.config_dir)
        logging_config = self.config_manager.get_app_config().get("logging") or {}
        level = args.log_level or logging_config.get("level", "INFO")
        log_file = args.log_file
        if log_file is None and logging_config.get("file"):
            log_file = Path(logging_config["file"])
            if not log_file.is_absolute():
                log_file = Path(args.config_dir).parent / log_file
        self.logger = Logger(log_file, level)

    def dispatch(self, args: argparse.Namespace):
        """サブコマンドを実行"""
        ctx = CommandContext(self.config_manager, self.logger)
        command = args.command
        if command == "synthesize":
            return cmd_synthesize(ctx, args.spec, args.out, args.seed)
        if command == "stats":
            return cmd_stats(ctx, args.data, args.out, args.bands, args.include_cloudy, args.all_regions)
        if command == "train":
            return cmd_train(ctx, args.config, args.data, args.out, args.seed, args.resume, args.max_iterations)
        if command == "predict":
            return cmd_predict(ctx, args.checkpoint, args.cubes, args.out, args.fuse, args.overlap,
                               args.bands, args.preset, args.tile_size, args.pgm, args.seam_check)
        if command == "fuse":
            max_ref = None if args.no_filter else args.max_ref
            return cmd_fuse(ctx, args.preds, args.cubes, args.out, args.fuse, args.ref, args.part, max_ref)
        if command == "evaluate":
            max_ref = None if args.no_filter else args.max_ref
            return cmd_evaluate(ctx, args.pred, args.ref, args.out, max_ref, args.part, args.xlsx)
        if command == "ablate":
            return cmd_ablate(ctx, args.config, args.data, args.out, args.seed, args.variants, xlsx=args.xlsx)
        if command == "params":
            return cmd_params(ctx, args.config, args.out)
        if command == "crossval":
            return cmd_crossval(ctx, args.config, args.data, args.out, args.seed, mode=args.mode, n_folds=args.folds)
        raise ValueError(f"未知のコマンドです: {command}")

    def run(self, argv: Optional[List[str]] = None) -> int:
        """
        アプリケーションを実行

        Returns:
            int: 終了コード（0 成功, 2 設定, 3 数値, 4 データ, 1 想定外）
        """
        args = self.build_parser().parse_args(argv)
        try:
            self._initialize(args)
            self.logger.log_operation("コマンド開始", args.command)
            with self.logger.timed(args.command):
                self.dispatch(args)
            return EXIT_OK
        except CanopyError as e:
            self._report(e, args.command)
            return e.exit_code
        except Exception as e:
            self._report(e, args.command)
            return EXIT_UNEXPECTED

    def _report(self, error: Exception, command: str):
        if self.logger is None:
            self.logger = Logger()
        self.logger.log_error(error, f"コマンド {command} が失敗しました")
        dump_path = getattr(error, "dump_path", None)
        if dump_path:
            self.logger.error(f"状態ダンプ: {dump_path}")
