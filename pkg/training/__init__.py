"""Training modules package"""
from .neural_network import SlacTimeNet, build_network
from .trainer import NetworkTrainer
from .slac_loop import run_slac

__all__ = ['SlacTimeNet', 'build_network', 'NetworkTrainer', 'run_slac']
