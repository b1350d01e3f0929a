# Multi-task loss module
