#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
stepfit 命令列介面

子命令: fit、predict、score、bootstrap、sample、simulate、study、validate

結束代碼: 0 成功；1 輸入或設定驗證失敗；2 數值估計失敗
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, NoReturn, Optional, Tuple

import numpy as np
import pandas as pd

from src.core.config_validator import (
    ConfigValidator,
    RuntimeSettings,
    load_runtime_settings,
    read_json,
)
from src.core.constants import EmDefaults, ExitCodes, SimulationDefaults, StepwiseDefaults
from src.core.data_model import (
    Dataset,
    ModelDescriptor,
    ModelDescriptors,
    apply_encodings,
    encode_descriptor_columns,
    load_csv,
    write_csv,
)
from src.core.em_engine import EmConfig
from src.core.exceptions import (
    ContractError,
    StepFitError,
    ValidationError,
    exit_code_for,
    get_recovery_suggestions,
    is_numerical_failure,
)
from src.core.logging_config import configure_logging, get_logger
from src.estimators.bootstrap import bootstrap_stats
from src.estimators.inference import information_criteria, predict_proba, sample_model, score
from src.estimators.simulation import BakkDesign, generate, run_study
from src.estimators.stepwise import (
    StepwiseConfig,
    export_confusion_csv,
    export_weights_csv,
    fit_stepwise,
    run_three_step,
)
from src.utils.report import SavedModel, load_saved, render_report, save_model, write_report

logger = get_logger("cli")


class StepfitArgumentParser(argparse.ArgumentParser):
    """參數錯誤時以結束代碼 1 離開"""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(ExitCodes.VALIDATION_ERROR, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# 參數定義
# ---------------------------------------------------------------------------


def _add_runtime_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, help="隨機種子（預設讀取 STEPFIT_SEED，否則為 0）")
    parser.add_argument("--jobs", type=int, help="並行工作數（預設為可用的邏輯 CPU 數）")


def _add_data_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data-mm", required=True, help="測量模型 (MM) 資料 CSV")
    parser.add_argument("--data-sm", help="結構模型 (SM) 資料 CSV")
    parser.add_argument("--weights-column", help="MM CSV 中的樣本權重欄位")


def _add_em_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--max-iter", type=int, default=EmDefaults.MAX_ITER, help="EM 最大迭代數")
    parser.add_argument("--abs-tol", type=float, default=EmDefaults.ABS_TOL, help="絕對收斂門檻")
    parser.add_argument("--rel-tol", type=float, default=EmDefaults.REL_TOL, help="相對收斂門檻")
    parser.add_argument("--n-init", type=int, default=EmDefaults.N_INIT, help="EM 初始化次數")


def _add_fit_args(parser: argparse.ArgumentParser) -> None:
    _add_data_args(parser)
    parser.add_argument(
        "--measurement", required=True, help="MM 描述檔：家族字串（如 binary）或 JSON 檔路徑"
    )
    parser.add_argument("--structural", help="SM 描述檔：家族字串或 JSON 檔路徑")
    parser.add_argument("--n-components", type=int, required=True, help="類別數 K")
    parser.add_argument(
        "--n-steps", type=int, default=1, choices=StepwiseDefaults.N_STEPS, help="估計步數"
    )
    parser.add_argument(
        "--assignment", choices=StepwiseDefaults.ASSIGNMENTS, help="三步估計的類別指派（預設 modal）"
    )
    parser.add_argument(
        "--correction", choices=StepwiseDefaults.CORRECTIONS, help="三步估計的校正方式（預設 none）"
    )
    parser.add_argument("--step1-data", help="第一步使用的另一組 MM 資料 CSV（兩步與三步）")
    _add_em_args(parser)
    _add_runtime_args(parser)


def build_parser() -> StepfitArgumentParser:
    parser = StepfitArgumentParser(
        prog="stepfit", description="潛在類別混合模型的逐步擬似概似估計"
    )
    parser.add_argument("--log-level", help="日誌級別 (DEBUG/INFO/WARNING/ERROR)")
    parser.add_argument("--log-dir", help="JSON 日誌檔目錄（未指定則不寫檔）")
    parser.add_argument("--env-file", help=".env 檔案路徑")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    fit = sub.add_parser("fit", help="擬合模型並寫出模型檔與報告")
    _add_fit_args(fit)
    fit.add_argument("--out", required=True, help="模型 JSON 輸出路徑")
    fit.add_argument("--report", help="報告輸出路徑（未指定時印到標準輸出）")
    fit.add_argument("--verbosity", type=int, default=1, choices=(0, 1), help="報告詳細程度")
    fit.add_argument("--weights-out", help="三步估計指派權重 CSV 輸出路徑")
    fit.add_argument("--confusion-out", help="三步估計 D 矩陣 CSV 輸出路徑")

    predict = sub.add_parser("predict", help="以模型檔預測類別")
    predict.add_argument("--model", required=True, help="模型 JSON 檔")
    _add_data_args(predict)
    predict.add_argument("--out", required=True, help="預測結果 CSV 輸出路徑")
    predict.add_argument("--proba", action="store_true", help="一併輸出各類別後驗機率")

    score_cmd = sub.add_parser("score", help="計算平均對數概似與資訊準則")
    score_cmd.add_argument("--model", required=True, help="模型 JSON 檔")
    _add_data_args(score_cmd)
    score_cmd.add_argument("--stats-out", help="擬合統計 JSON 輸出路徑")

    boot = sub.add_parser("bootstrap", help="以模型檔的估計方法執行無母數 bootstrap")
    boot.add_argument("--model", required=True, help="主模型 JSON 檔（對齊基準）")
    _add_data_args(boot)
    boot.add_argument("--reps", type=int, required=True, help="bootstrap 重複次數")
    boot.add_argument(
        "--assignment", choices=StepwiseDefaults.ASSIGNMENTS, default="modal", help="三步估計的類別指派"
    )
    boot.add_argument("--out", required=True, help="長格式樣本 CSV 輸出路徑")
    _add_em_args(boot)
    _add_runtime_args(boot)

    sample = sub.add_parser("sample", help="由模型抽樣")
    sample.add_argument("--model", required=True, help="模型 JSON 檔")
    sample.add_argument("--n", type=int, required=True, help="抽樣數")
    sample.add_argument("--out-mm", required=True, help="MM 抽樣 CSV 輸出路徑")
    sample.add_argument("--out-sm", help="SM 抽樣 CSV 輸出路徑")
    sample.add_argument("--out-classes", help="抽樣類別 CSV 輸出路徑")
    _add_runtime_args(sample)

    simulate = sub.add_parser("simulate", help="產生模擬設計資料")
    simulate.add_argument(
        "design", help="模擬設計: response / covariate / complete（可加 bakk- 前綴）"
    )
    simulate.add_argument("--n", type=int, required=True, help="樣本數")
    simulate.add_argument(
        "--sep", type=float, default=SimulationDefaults.DEFAULT_SEPARATION, help="類別分離程度 γ"
    )
    simulate.add_argument("--missing-ratio", type=float, default=0.0, help="MCAR 缺失比例")
    simulate.add_argument("--out-dir", default=".", help="輸出目錄")
    simulate.add_argument("--prefix", help="輸出檔名前綴（預設為設計名稱）")
    _add_runtime_args(simulate)

    study = sub.add_parser("study", help="執行模擬研究並寫出偏誤與 RMSE 表")
    study.add_argument("design", help="模擬設計: response / covariate / complete")
    study.add_argument(
        "--n", type=int, nargs="+", default=list(SimulationDefaults.SAMPLE_SIZES), help="樣本數"
    )
    study.add_argument("--sep", type=float, nargs="+", help="類別分離程度（response / covariate）")
    study.add_argument("--missing-ratio", type=float, nargs="+", help="缺失比例（complete）")
    study.add_argument(
        "--reps", type=int, default=SimulationDefaults.DEFAULT_REPLICATIONS, help="每個設定的重複次數"
    )
    study.add_argument(
        "--estimators",
        nargs="+",
        choices=SimulationDefaults.ESTIMATORS,
        default=list(SimulationDefaults.ESTIMATORS),
        help="估計方法",
    )
    study.add_argument(
        "--n-init", type=int, default=SimulationDefaults.STUDY_N_INIT, help="每次 EM 的初始化次數"
    )
    study.add_argument("--out", required=True, help="偏誤與 RMSE 表 CSV 輸出路徑")
    study.add_argument("--replications-out", help="逐次重複估計值 CSV 輸出路徑")
    _add_runtime_args(study)

    validate = sub.add_parser("validate", help="檢查描述檔與資料、.env 設定")
    validate.add_argument("--descriptor", help="描述檔 JSON")
    validate.add_argument("--data", help="描述檔對應的資料 CSV")
    validate.add_argument("--env", help=".env 檔案")

    return parser


# ---------------------------------------------------------------------------
# 共用輔助
# ---------------------------------------------------------------------------


def _seed(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    if args.seed is not None:
        return int(args.seed)
    return settings.seed if settings.seed is not None else EmDefaults.SEED


def _jobs(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    return int(args.jobs) if args.jobs is not None else settings.jobs


def _em_config(args: argparse.Namespace, settings: RuntimeSettings) -> EmConfig:
    return EmConfig(
        max_iter=args.max_iter,
        abs_tol=args.abs_tol,
        rel_tol=args.rel_tol,
        n_init=args.n_init,
        seed=_seed(args, settings),
        n_jobs=_jobs(args, settings),
    )


def _parse_descriptor(raw: str, n_columns: int) -> ModelDescriptor:
    """家族字串或描述檔路徑"""
    if raw.lower().endswith(".json") or Path(raw).is_file():
        return ModelDescriptor.parse(read_json(raw, "描述檔"), n_columns)
    return ModelDescriptor.parse(raw, n_columns)


def _load_data(args: argparse.Namespace) -> Tuple[Dataset, Optional[Dataset]]:
    data_mm = load_csv(args.data_mm, args.weights_column)
    data_sm = load_csv(args.data_sm) if args.data_sm else None
    return data_mm, data_sm


def _design_kind(raw: str) -> str:
    kind = raw.lower()
    return kind[len("bakk-") :] if kind.startswith("bakk-") else kind


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------


def cmd_fit(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    data_mm, data_sm = _load_data(args)
    if (data_sm is None) != (args.structural is None):
        raise ContractError("--data-sm 與 --structural 必須同時提供", argument="structural")

    mm_desc = _parse_descriptor(args.measurement, data_mm.n_columns)
    data_mm, mm_desc = encode_descriptor_columns(data_mm, mm_desc)
    sm_desc = None
    if data_sm is not None:
        sm_desc = _parse_descriptor(args.structural, data_sm.n_columns)
        data_sm, sm_desc = encode_descriptor_columns(data_sm, sm_desc)
    step1_data = None
    if args.step1_data:
        step1_data = apply_encodings(load_csv(args.step1_data), data_mm.level_maps)

    descriptors = ModelDescriptors(mm_desc, sm_desc)
    config = StepwiseConfig(
        n_components=args.n_components,
        n_steps=args.n_steps,
        assignment=args.assignment or "modal",
        correction=args.correction or "none",
        em_config=_em_config(args, settings),
    )

    if config.n_steps == 3 and (args.weights_out or args.confusion_out):
        result = run_three_step(data_mm, data_sm, descriptors, config, step1_data)
        model = result.model
        if args.weights_out:
            export_weights_csv(result.weights, args.weights_out)
        if args.confusion_out:
            if result.confusion is None:
                raise ContractError("只有 bch 或 ml 校正會計算 D 矩陣", argument="confusion_out")
            export_confusion_csv(result.confusion, args.confusion_out)
    else:
        model = fit_stepwise(data_mm, data_sm, descriptors, config, step1_data)

    stats = information_criteria(model, data_mm, data_sm)
    encodings = {
        "measurement": dict(data_mm.level_maps),
        "structural": dict(data_sm.level_maps) if data_sm is not None else {},
    }
    save_model(model, args.out, stats, encodings)

    text = render_report(model, stats, args.verbosity)
    if args.report:
        write_report(text, args.report)
    else:
        sys.stdout.write(text)
    return ExitCodes.OK


def _load_for_inference(
    args: argparse.Namespace,
) -> Tuple[SavedModel, Dataset, Optional[Dataset]]:
    saved = load_saved(args.model)
    data_mm, data_sm = _load_data(args)
    data_mm = apply_encodings(data_mm, saved.level_maps("measurement"))
    if data_sm is not None:
        data_sm = apply_encodings(data_sm, saved.level_maps("structural"))
    return saved, data_mm, data_sm


def cmd_predict(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    saved, data_mm, data_sm = _load_for_inference(args)
    resp = predict_proba(saved.model, data_mm, data_sm)
    frame = pd.DataFrame({"class": resp.modal()})
    if args.proba:
        for k in range(resp.n_components):
            frame[f"p{k}"] = resp.tau[:, k]
    frame.to_csv(args.out, index=False)
    logger.log_data_info("預測完成", count=resp.n_units, path=args.out)
    return ExitCodes.OK


def cmd_score(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    saved, data_mm, data_sm = _load_for_inference(args)
    value = score(saved.model, data_mm, data_sm)
    sys.stdout.write(f"{value!r}\n")
    if args.stats_out:
        stats = information_criteria(saved.model, data_mm, data_sm)
        with open(args.stats_out, "w", encoding="utf-8") as f:
            json.dump(stats.to_dict(), f, indent=2, ensure_ascii=False)
    return ExitCodes.OK


def cmd_bootstrap(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    saved, data_mm, data_sm = _load_for_inference(args)
    model = saved.model
    if model.fit_meta is None:
        raise ValidationError(
            "模型檔缺少 fit_meta，無法得知估計方法", field_name="fit_meta", validation_rule="present"
        )
    em_config = _em_config(args, settings)
    config = StepwiseConfig.from_label(
        model.fit_meta.estimator, model.n_components, em_config, assignment=args.assignment
    )
    descriptors = ModelDescriptors(model.measurement_descriptor(), model.structural_descriptor())
    result = bootstrap_stats(
        model,
        data_mm,
        data_sm,
        descriptors,
        config,
        args.reps,
        seed=em_config.seed,
        n_jobs=em_config.n_jobs,
    )
    result.to_csv(args.out)
    logger.log_data_info(
        "bootstrap 樣本已輸出", count=len(result.samples), n_failed=result.n_failed, path=args.out
    )
    return ExitCodes.OK


def cmd_sample(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    saved = load_saved(args.model)
    sampled = sample_model(saved.model, args.n, np.random.default_rng(_seed(args, settings)))
    write_csv(sampled.data_mm, args.out_mm)
    if args.out_sm and sampled.data_sm is not None:
        write_csv(sampled.data_sm, args.out_sm)
    if args.out_classes:
        pd.DataFrame({"class": sampled.classes}).to_csv(args.out_classes, index=False)
    return ExitCodes.OK


def cmd_simulate(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    kind = _design_kind(args.design)
    design = BakkDesign(
        kind,
        args.n,
        separation=args.sep,
        missing_ratio=args.missing_ratio,
        seed=_seed(args, settings),
    )
    paths = generate(design).write(args.out_dir, args.prefix or f"bakk_{kind}")
    logger.log_data_info("模擬資料已輸出", count=design.n, files=[str(p) for p in paths])
    return ExitCodes.OK


def cmd_study(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    kind = _design_kind(args.design)
    levels: Optional[List[float]] = args.missing_ratio if kind == "complete" else args.sep
    result = run_study(
        kind,
        args.n,
        levels=levels,
        n_replications=args.reps,
        estimators=args.estimators,
        base_seed=_seed(args, settings),
        n_jobs=_jobs(args, settings),
        n_init=args.n_init,
    )
    result.to_csv(args.out)
    if args.replications_out:
        result.replications.to_csv(args.replications_out, index=False, float_format="%.17g")
    sys.stdout.write(result.to_wide().to_string(index=False) + "\n")
    return ExitCodes.OK


def cmd_validate(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    validator = ConfigValidator()
    results: Dict[str, Tuple[bool, List[str]]] = {}
    if args.descriptor:
        n_columns = load_csv(args.data).n_columns if args.data else None
        results[args.descriptor] = validator.validate_descriptor_file(args.descriptor, n_columns)
    if args.env:
        results[args.env] = validator.validate_env_file(args.env)
    if not results:
        raise ContractError("請至少提供 --descriptor 或 --env", argument="descriptor")
    ok = validator.print_validation_report(results)
    return ExitCodes.OK if ok else ExitCodes.VALIDATION_ERROR


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "score": cmd_score,
    "bootstrap": cmd_bootstrap,
    "sample": cmd_sample,
    "simulate": cmd_simulate,
    "study": cmd_study,
    "validate": cmd_validate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """主程式入口"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "fit" and args.n_steps != 3:
        if args.assignment is not None or args.correction is not None:
            parser.error("--assignment 與 --correction 只能搭配 --n-steps 3 使用")

    try:
        settings = load_runtime_settings(args.env_file)
        configure_logging(args.log_level or settings.log_level, args.log_dir or settings.log_dir)
        return COMMANDS[args.command](args, settings)
    except StepFitError as e:
        title = "數值估計失敗" if is_numerical_failure(e) else "錯誤"
        logger.error(f"⛔ {title}: {e}", error_type=type(e).__name__)
        for suggestion in get_recovery_suggestions(e):
            logger.info(f"💡 {suggestion}")
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
